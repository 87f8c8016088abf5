"""Beta process factor analysis with stochastic variational inference.

Five local-inference strategies (mean-field, sampled mean-field, Titsias
spike-and-slab, Mimno-style Gibbs on expected moments and Gibbs with a
sampled global draw) share one natural-gradient global update.  A full
uncollapsed Gibbs sampler serves as a reference.
"""
from .model import (Dataset, GlobalSample, Hyperparameters, LocalSample, Locals, log_joint, log_prior,
                    sample_generative, sample_truncated_beta_process)
from .variational import (GlobalVariationalState, NaturalStats, expected_global, full_batch_cavi_update,
                          prior_natural, random_init, sample_global, step_size, svi_step)
from .local import (LocalOptions, LocalVariationalParams, LocalView, Strategy, StrategyTag, coordinate_ascent,
                    gibbs_chain, gibbs_ssvi_local, infer_local, local_elbo, mf_ssvi_local, mf_svi_local,
                    mimno_gibbs_local, stats_from_variational, titsias_ssvi_local)
from .gibbs_baseline import ChainState, gibbs_iteration, run_chain
from .evaluation import MetricRecord, predictive, predictive_loglik, predictive_mse, psnr, reconstruct_from_patches

__version__ = "0.1.0"
