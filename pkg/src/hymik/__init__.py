"""Space-time disease-mapping models with two ways of handling linear constraints.

``kriging`` corrects every Newton iterate with the full constraint set;
``hymik`` absorbs an orthonormal block of the interaction constraints into a
projection-based mixed-effect pair and kriges only the rest.
"""

__version__ = "0.1.0"

from .constraints import (ConstraintSet, HymikSplit, KrigingCorrection, assemble_joint_precision,
                          build_gc_constraints, build_projection, build_sc_constraints,
                          krige_correct, reduce_to_full_rank, split_constraints)
from .inference import (GaussianApprox, HyperGrid, PosteriorReport, corrected_marginal_likelihood,
                        evaluate_theta, explore_hyperparameters, fit, gaussian_approximation,
                        latent_marginals, log_posterior_theta)
from .io import data_path, load_counts, load_graph
from .likelihoods import ObservationSet, loglik_terms
from .model import (GenericLatentModel, Hyperparameters, SpaceTimeModel, build_latent_model,
                    prior_precision)
from .simulate import SimulationConfig, sample_constrained_effect, simulate_dataset
from .sparse import cholesky, log_det, sample_gmrf, solve
from .structures import (Graph, StructureMatrix, build_icar_structure, build_interaction_structure,
                         build_rw_structure, generalized_log_det, scale_structure)

__all__ = [
    "ConstraintSet", "HymikSplit", "KrigingCorrection", "assemble_joint_precision",
    "build_gc_constraints", "build_projection", "build_sc_constraints", "krige_correct",
    "reduce_to_full_rank", "split_constraints",
    "GaussianApprox", "HyperGrid", "PosteriorReport", "corrected_marginal_likelihood",
    "evaluate_theta", "explore_hyperparameters", "fit", "gaussian_approximation",
    "latent_marginals", "log_posterior_theta",
    "data_path", "load_counts", "load_graph",
    "ObservationSet", "loglik_terms",
    "GenericLatentModel", "Hyperparameters", "SpaceTimeModel", "build_latent_model",
    "prior_precision",
    "SimulationConfig", "sample_constrained_effect", "simulate_dataset",
    "cholesky", "log_det", "sample_gmrf", "solve",
    "Graph", "StructureMatrix", "build_icar_structure", "build_interaction_structure",
    "build_rw_structure", "generalized_log_det", "scale_structure",
]
