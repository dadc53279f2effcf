"""Non-contrastive collaborative filtering with coding-rate compactness.

A linear graph encoder over the user-item bipartite graph, trained with
an alignment + compactness objective (or the BPR / InfoNCE / alignment-
uniformity baselines), with cluster-membership solvers, full-ranking
evaluation, and covariance-spectrum collapse diagnostics.
"""

from .data import (InteractionSet, NormalizedAdjacency, SplitDataset,
                   apply_k_core, build_adjacency, load_interactions,
                   load_snapshot, save_snapshot, split_per_user)
from .encoder import (EmbeddingTable, ForwardCache, backprop, forward,
                      init_embeddings, normalize_rows, propagate, score)
from .objectives import (LossResult, RateParams, alignment_loss, bpr_loss,
                         coding_rate, compactness_loss, infonce_loss,
                         logdet_psd, ncl_total, per_cluster_coding_rate,
                         uniformity_loss)
from .clustering import (AssignmentMatrix, ClassifierHead, CooccurrenceGraph,
                         MembershipSet, build_cooccurrence, classifier_forward,
                         full_cluster_memberships, init_head, ipot_assign,
                         memberships_from_assignments, sample_memberships,
                         thresholded_memberships, update_classifier)
from .diagnostics import SpectrumReport, covariance, embedding_metrics, spectrum
from .evaluation import (RankingMetrics, degree_bucket_eval,
                         groups_from_interactions, rank_and_score)
from .trainer import (AdamState, EpochReport, TrainConfig, Trainer,
                      TrainResult, adam_step, minibatch_iter, train)

__version__ = "0.1.0"
