"""
Build a cache for a small repository and ask it for context
===========================================================

"""

# a generated repository: 12 files, 5 short functions each
import numpy as np

from hef import cache, index, query
from hef.embedder import EmbedderConfig
from hef.synthetic import SyntheticSpec, synthetic_repos

repo = synthetic_repos(SyntheticSpec(repos=1, files_per_repo=12, chunks_per_file=5, seed=42))[0]
for path in sorted(repo)[:4]:
    print(path, len(repo[path]), "bytes")

# every function becomes one leaf; files, directories and the repo get fused parents
cfg = EmbedderConfig(dim=256)
c = cache.build_cache(repo, cfg, b=8)
print("nodes per level:", np.bincount(c.levels()).tolist())
print("root covers", len(c.nodes[c.root_id].span_refs), "spans")

# the index holds every level, so a query can land on a function, a file or a package
idx = index.build_index(c)

# use the first lines of one function as the prefix being completed
path = sorted(repo)[3]
prefix = "\n".join(repo[path].splitlines()[:3])
print(prefix)

projector = query.ProjectorParams.init(cfg.dim, d_hidden=128, d_g=64, seed=0)
query.complete_context(prefix, c, idx, projector, K=8)  # first call loads the compiled search kernels
block = query.complete_context(prefix, c, idx, projector, K=8)
print("pseudo-token block", block.tokens.shape)
for p in block.provenance[:5]:
    where = ", ".join(f"{f}[{a}:{b}]" for f, (a, b) in p.span_refs[:2])
    print(f"  level {p.level}  score {p.score:.3f}  {where}{' ...' if len(p.span_refs) > 2 else ''}")

# the block size follows K, not the size of the repository
print({k: f"{v * 1e3:.2f} ms" for k, v in block.timings.items()})
