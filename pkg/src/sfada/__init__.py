"""Source-free active domain adaptation at desk scale."""
from .adaptation import AdaptConfig, LossWeights, PersistenceVault, adapt_round
from .domains import DomainSpec, LabeledSet, gen_gaussian_ring, gen_two_moons_shift, load_csv
from .estimator import ActiveAdapter, SourceClassifier
from .harness import ExperimentConfig, run_experiment
from .model import MlpModel, load_checkpoint, save_checkpoint
from .sampling import CasConfig, HypothesisLog, cas_scores, select_queries

__version__ = "0.1.0"
