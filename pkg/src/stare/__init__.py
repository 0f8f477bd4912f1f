"""Structure-aware exemplar retrieval for semantic-parsing prompts."""

from .bucketing import LshIndex, exact_jaccard, extract_features, lsh_params, minhash
from .corpus import Corpus, Record, load_corpus, save_corpus
from .encoder import EncoderConfig, InjectionDirection, TrainConfig, embed, forward, train
from .mining import ContrastiveGroup, MiningConfig, mine_all, mine_group
from .mli import Probe, SweepGrid, TokenLabelCorpus, extract_direction, sweep, train_probe
from .retrieval import PromptSpec, RetrievalIndex, bm25_topk, build_index, build_prompt, topk
from .ted import EditCosts, sim_struct, ted, ted_bruteforce
from .trees import (ParseDialect, ParseTree, anonymize_leaves, parse, parse_bracketed,
                    parse_sexpr, parse_sql_skeleton)

__version__ = "0.1.0"

__all__ = [
    "Corpus", "ContrastiveGroup", "EditCosts", "EncoderConfig", "InjectionDirection",
    "LshIndex", "MiningConfig", "ParseDialect", "ParseTree", "Probe", "PromptSpec",
    "Record", "RetrievalIndex", "SweepGrid", "TokenLabelCorpus", "TrainConfig",
    "anonymize_leaves", "bm25_topk", "build_index", "build_prompt", "embed",
    "exact_jaccard", "extract_direction", "extract_features", "forward", "load_corpus",
    "lsh_params", "mine_all", "mine_group", "minhash", "parse", "parse_bracketed",
    "parse_sexpr", "parse_sql_skeleton", "save_corpus", "sim_struct", "sweep", "ted",
    "ted_bruteforce", "topk", "train", "train_probe",
]
