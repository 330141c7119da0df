"""Bayesian multitask learning and domain adaptation with a latent
coalescent tree over tasks."""

__version__ = "0.1.0"

from .coalescent import (CoalescentTree, GaussianMessage, TreeNode,  # noqa: E402
                         bp_upward, cavity_messages, coalescent_log_prior,
                         from_newick, greedy_rate1, posterior_marginals,
                         sample_coalescent, to_dot, to_newick)
from .da_model import (DaConfig, DaModelState, da_e_step, da_fit,  # noqa: E402
                       da_init, da_m_step, da_predict)
from .diffusion import (DiffusionKernel, DiscreteKernel, RootPrior,  # noqa: E402
                        brownian_transition, discrete_transition_matrix,
                        sample_da_instance, sample_mtl_instance)
from .errors import (CoalmtlError, ConfigError, ConvergenceError,  # noqa: E402
                     DataError, InvalidTreeError, NumericalError)
from .evalbench import (EvalReport, MultiTaskCorpus, baseline_feda,  # noqa: E402
                        baseline_indp, baseline_pool, learning_curve,
                        load_corpus, metric_accuracy, metric_auc, pca_project,
                        save_corpus, scramble_task, target_transfer)
from .learners import (TaskDataset, WeightPosterior, laplace_covariance,  # noqa: E402
                       map_weights)
from .mtl_model import (MtlConfig, MtlModelState, correlation_log_prior,  # noqa: E402
                        mtl_fit, mtl_init, mtl_predict, optimize_s, r_update,
                        s_grad, s_log_posterior)
