"""Consistency-regularized BPR for personalized complementary clothing matching."""

from .data import (Catalog, DataError, Dataset, FeatureStore, SynthConfig, TripletSet, generate_synthetic,
                   load_dataset, load_features, load_triplets, save_dataset, split_triplets)
from .evaluate import EvalProtocol, MetricReport, auc, emit_report, evaluate, rank_case, rank_metrics
from .history import HistoryIndex, HistoryQuery, build_index, query_list
from .model import (CRBPR, BranchToggles, ConfigError, Hyperparams, load_checkpoint, reduce_to_baseline,
                    save_checkpoint)
from .trainer import ABLATIONS, GridSpec, TrainRun, ablation_variant, run_ablation, run_grid, train

__version__ = "0.1.0"
