"""Evolutionary search for random-weight CNNs aligned with neural responses."""

from .data import Dataset, TeacherSpec, default_teacher, generate_synthetic, load_dataset, save_dataset
from .evolve import SearchConfig, SearchResult, crossover, edit_distance, mutate, repopulate, run_search, select
from .genome import Genome, LayerGene, deserialize, random_genome, serialize, validate
from .metrics import ScoreSettings, fitness, layer_profile, score_report
from .randnet import extract_features, forward, init_weights

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "Genome",
    "LayerGene",
    "ScoreSettings",
    "SearchConfig",
    "SearchResult",
    "TeacherSpec",
    "crossover",
    "default_teacher",
    "deserialize",
    "edit_distance",
    "extract_features",
    "fitness",
    "forward",
    "generate_synthetic",
    "init_weights",
    "layer_profile",
    "load_dataset",
    "mutate",
    "random_genome",
    "repopulate",
    "run_search",
    "save_dataset",
    "score_report",
    "select",
    "serialize",
    "validate",
]
