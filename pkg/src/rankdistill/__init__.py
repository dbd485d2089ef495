"""Ranking knowledge distillation for top-N recommenders from implicit feedback."""

from .dataset import (
    Batch,
    DataError,
    InteractionDataset,
    leave_one_out_split,
    load_interactions,
    sample_negatives,
)
from .distill import (
    CorrectionSample,
    CorrectionSamples,
    RRDTargets,
    build_rrd_targets,
    discrepancy_over,
    discrepancy_under,
    icd_loss,
    relaxed_log_prob,
    rrd_loss,
    sample_correction,
    ucd_loss,
)
from .evaluation import MetricReport, avg_rank_discrepancy, evaluate, hit_at_n, mrr_at_n, paired_ttest
from .models import AdamState, ModelParams, NumericalError, adam_step, base_loss, init_params, score
from .ranking import CandidatePool, RankingList, build_pool, rank_candidates, top_n
from .trainer import TrainConfig, distill_student, run_ablation, train_teacher

__version__ = "0.1.0"
