"""
Edit one file and refresh only what changed
===========================================

"""

from hef import cache
from hef.embedder import EmbedderConfig
from hef.fuser import AttnFuser, FuserParams
from hef.synthetic import SyntheticSpec, synthetic_repos

repo = synthetic_repos(SyntheticSpec(repos=1, files_per_repo=80, chunks_per_file=4, seed=1))[0]
cfg = EmbedderConfig(dim=128)
fuser = AttnFuser(FuserParams.init(128, d_f=32, heads=2, seed=0))
before = cache.build_cache(repo, cfg, fuser)
print(len(before.nodes), "nodes")

# rewrite one file: keep its first function, drop the rest
path = "pkg_1/mod_004.py"
edited = repo[path].split("\n\n")[0]
after = cache.update_cache(before, [(path, edited)], cfg, fuser)
# stats count embedded leaves plus internal nodes fused anew or taken from the old cache
print(after.stats)

# node ids hash their content, so every node off the edited path keeps its id
reused = sum(1 for nid in after.nodes if nid in before.nodes)
print(reused, "of", len(after.nodes), "nodes carried over, leaves included")

# the refreshed cache is byte-for-byte what a full rebuild produces
rebuilt = cache.build_cache({**repo, path: edited}, cfg, fuser)
print("identical to rebuild:", cache.encode_cache(after) == cache.encode_cache(rebuilt))

# deleting a file is an update with no new text
gone = cache.update_cache(after, [(path, None)], cfg, fuser)
print(len(gone.nodes), "nodes after deleting", path)
