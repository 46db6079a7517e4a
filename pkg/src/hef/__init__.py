"""Hierarchical embedding fusion for repository-level code completion context.

Offline, a repository is chunked, embedded, and fused bottom-up into a tree
of unit vectors that is cached on disk with an HNSW index. Online, a code
prefix is embedded, the top-K tree nodes are retrieved, and a small MLP
projects them into a fixed-size block of pseudo-token vectors.
"""

from .cache import (
    HierarchyNode,
    RepoCache,
    build_cache,
    load,
    read_repo,
    save,
    update_cache,
    validate,
)
from .corpus import Chunk, EntityList, Token, chunk_file, extract_entities, tokenize
from .embedder import EmbedderConfig, embed, embed_many, import_vectors
from .errors import (
    CacheChecksumError,
    CacheFormatError,
    CacheInvariantError,
    CacheTruncatedError,
    ConfigError,
    ContractError,
    CorpusError,
    EmptyRepoError,
    HefError,
    NonFiniteError,
    StaleParamsError,
    VectorImportError,
)
from .fuser import AttnFuser, FuserParams, FuserTrainConfig, MeanFuser, infonce_loss, train_contrastive
from .index import HnswConfig, HnswIndex, RetrievalHit, brute_force, build_index, search
from .query import ProjectorParams, PseudoTokenBlock, complete_context, form_query, project
from .synthetic import SyntheticSpec, generate_synthetic, synthetic_repos
from .uwl import NgramLm, UwlRecord, filter_pairs, fit_lm, log_likelihood, uwl_score

__version__ = "0.1.0"
