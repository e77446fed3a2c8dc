"""Deep-learning biomarkers fed to explainable boosting machines, at desk scale."""
from .volume import PatchSpec, Volume, read_rv1, write_rv1
from .ebm import EbmConfig, EbmModel, TabularDataset, fit_ebm, fit_ebm_with_pairs
from .scorer import ConvScorer, TrainConfig, train
from .occlusion import OcclusionConfig, RoiSet
from .synthgen import SynthConfig, make_atlas, make_cohort
from .pipeline import PipelineConfig, RunManifest, run_full

__all__ = [
    "PatchSpec", "Volume", "read_rv1", "write_rv1",
    "EbmConfig", "EbmModel", "TabularDataset", "fit_ebm", "fit_ebm_with_pairs",
    "ConvScorer", "TrainConfig", "train",
    "OcclusionConfig", "RoiSet",
    "SynthConfig", "make_atlas", "make_cohort",
    "PipelineConfig", "RunManifest", "run_full",
]
