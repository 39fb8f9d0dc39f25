"""pcfgkit: grammar induction with neural/compound PCFGs, optional visual
grounding, and zero-shot cross-domain transfer through frozen pre-trained
word embeddings."""

__version__ = "0.1.0"

from .grammar import (GrammarShape, ParseTree, RuleTable, Sentence, SpanPolicy, SpanSet,
                      sample_corpus, sample_sentence, tree_to_spans, validate_grammar)
from .chart import (InsideChart, OutsideChart, PosteriorTable, brute_force_marginal,
                    expected_rule_counts, inside, mbr_decode, outside, span_posteriors,
                    viterbi_decode)
from .parameterization import (LossBreakdown, NetworkDims, ParameterSet, TrainingConfig,
                               compute_rule_table, encode_latent, kl_standard_normal,
                               loss_and_gradients, update_parameters)
from .grounding import (GroundingConfig, ImageVector, expected_match_score, hinge_loss,
                        span_representation)
from .lexicon import (EmbeddingTable, SelectionReport, Vocabulary, build_vocabulary,
                      load_embeddings, select_embeddings, unknown_stats)
from .evaluation import (EvalRecord, MetricsReport, branching_baseline, corpus_f1,
                         perm_baseline, sentence_f1)
from .analysis import (ErrorBucketTable, FactorInventory, OverlapReport, error_buckets,
                       extract_factors, overlap_rates, paired_t_test,
                       seed_experiment_protocol, spearman)
from .treebank import Treebank, filter_by_length, read_plaintext, read_treebank
from .pipeline import ExperimentConfig, load_config, run_parse, run_train
