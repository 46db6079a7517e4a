"""Command-line entry point: ``hef <command> [flags]``.

Exit codes are fixed per error category (see ``EXIT_CODES``). Every flag
can also come from a ``key=value`` file given with ``--config``; flags on
the command line win.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import cache as cache_mod
from .bench import BenchConfig, run_bench, write_report
from .corpus import token_texts
from .embedder import EmbedderConfig, import_vectors
from .errors import (
    CacheFormatError,
    ConfigError,
    ContractError,
    CorpusError,
    EmptyRepoError,
    HefError,
    NonFiniteError,
    StaleParamsError,
    VectorImportError,
)
from .fuser import AttnFuser, FuserParams, FuserTrainConfig, MeanFuser, train_contrastive, write_loss_csv
from .index import HnswConfig, build_index, ensure_index
from .query import K_PRESETS, ProjectorParams, complete_context, write_block
from .synthetic import SyntheticSpec
from .train import contrastive_corpus, root_top1
from .uwl import fit_lm, filter_pairs, read_pairs

log = logging.getLogger("hef")

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2
EXIT_MISSING = 3
EXIT_INPUT = 4
EXIT_CACHE = 5
EXIT_STALE = 6
EXIT_NUMERIC = 7

EXIT_CODES = [
    (StaleParamsError, EXIT_STALE),
    (CacheFormatError, EXIT_CACHE),
    (NonFiniteError, EXIT_NUMERIC),
    ((ContractError, ConfigError, CorpusError, VectorImportError, EmptyRepoError), EXIT_INPUT),
    (FileNotFoundError, EXIT_MISSING),
    (HefError, EXIT_INTERNAL),
    (ValueError, EXIT_INPUT),
]


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def read_config(path: str) -> Dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            out[key.replace("-", "_")] = value
    return out


def _embedder(args) -> EmbedderConfig:
    return EmbedderConfig(dim=args.dim, seed=args.seed)


def _hnsw(args) -> HnswConfig:
    return HnswConfig(ef_search=args.ef_search, seed=args.seed)


def _repo_files(root: str) -> List:
    path = Path(root)
    if not path.is_dir():
        raise FileNotFoundError(f"repository directory not found: {root}")
    return cache_mod.read_repo(path)


def _print(args, payload: dict, text: str) -> None:
    if args.format == "json":
        print(json.dumps(payload))
    else:
        print(text)


def cmd_build(args) -> int:
    files = _repo_files(args.repo)
    cfg = _embedder(args)
    fuser = AttnFuser(FuserParams.load(args.fuser_params)) if args.fuser_params else MeanFuser()
    vectors = import_vectors(args.vectors, cfg.dim) if args.vectors else None
    cache = cache_mod.build_cache(files, cfg, fuser, b=args.branching, repo_id=Path(args.repo).name,
                                  vectors=vectors)
    index = build_index(cache, _hnsw(args))
    cache_mod.save(cache, args.cache, index)
    m = cache.build_meta
    _print(args, {"nodes": m.node_count, "levels": m.level_count, "leaves": len(cache.leaves()),
                  "seconds": m.build_seconds, "cache": args.cache},
           f"built {args.cache}: {m.node_count} nodes, {m.level_count} levels, "
           f"{len(cache.leaves())} leaves in {m.build_seconds:.2f}s")
    return EXIT_OK


def cmd_update(args) -> int:
    cache = cache_mod.load(args.cache, with_index=False)
    root = Path(args.repo)
    changed = []
    for rel in args.changed:
        p = root / rel
        changed.append((Path(rel).as_posix(), p.read_text(encoding="utf-8") if p.exists() else None))
    fuser = AttnFuser(FuserParams.load(args.fuser_params)) if args.fuser_params else cache.fuser()
    new = cache_mod.update_cache(cache, changed, cache.embedder_cfg, fuser)
    index = build_index(new, _hnsw(args))
    cache_mod.save(new, args.cache, index)
    s = new.stats
    _print(args, {"nodes": len(new.nodes), "embedded": s.embedded_leaves, "fused": s.fused_nodes,
                  "reused": s.reused_nodes},
           f"updated {args.cache}: {len(new.nodes)} nodes; embedded {s.embedded_leaves}, "
           f"fused {s.fused_nodes}, reused {s.reused_nodes}")
    return EXIT_OK


def cmd_query(args) -> int:
    cache = cache_mod.load(args.cache)
    index = ensure_index(cache, _hnsw(args))
    prefix = Path(args.prefix_file).read_text(encoding="utf-8") if args.prefix_file else sys.stdin.read()
    if args.projector:
        projector = ProjectorParams.load(args.projector)
    else:
        projector = ProjectorParams.init(cache.embedder_cfg.dim, args.d_hidden, args.d_g, seed=args.seed)
    sources = dict(_repo_files(args.repo)) if args.entities else None
    K = K_PRESETS.get(args.K, None) or int(args.K)
    block = complete_context(prefix, cache, index, projector, K, with_entities=args.entities,
                             sources=sources, ef_search=args.ef_search, dedup=args.dedup)
    bin_path, json_path = write_block(block, args.out)
    ms = {k: v * 1e3 for k, v in block.timings.items()}
    _print(args, {"m": block.m, "d_g": int(block.tokens.shape[1]), "block": str(bin_path),
                  "sidecar": str(json_path), "latency_ms": ms},
           f"m={block.m} d_g={block.tokens.shape[1]} total={sum(ms.values()):.2f}ms "
           + " ".join(f"{k}={v:.2f}ms" for k, v in ms.items()))
    return EXIT_OK


def cmd_train_fuser(args) -> int:
    root = Path(args.repo)
    if not root.is_dir():
        raise FileNotFoundError(f"corpus directory not found: {args.repo}")
    repos = [cache_mod.read_repo(d) for d in sorted(root.iterdir()) if d.is_dir()]
    cfg = _embedder(args)
    corpus = contrastive_corpus(repos, cfg, b=args.branching, holdout_fraction=args.holdout, seed=args.seed)
    tcfg = FuserTrainConfig(steps=args.steps, lr=args.lr, warmup_steps=args.warmup, batch_size=args.batch,
                            tau=args.tau, seed=args.seed, d_f=args.d_f)
    res = train_contrastive(corpus, tcfg)
    res.params.save(args.out)
    if args.loss_csv:
        write_loss_csv(res.curve, args.loss_csv)
    top_mean, top_attn = root_top1(corpus, MeanFuser()), root_top1(corpus, res.params)
    _print(args, {"initial_val_loss": res.initial_val_loss, "best_val_loss": res.best_val_loss,
                  "best_step": res.best_step, "top1_mean": top_mean, "top1_trained": top_attn},
           f"val loss {res.initial_val_loss:.4f} -> {res.best_val_loss:.4f} (step {res.best_step}); "
           f"held-out top-1 {top_attn:.3f} vs mean fuser {top_mean:.3f}")
    return EXIT_OK


def cmd_uwl_filter(args) -> int:
    pairs = read_pairs(args.pairs)
    corpus = [token_texts(text) for _, text in _repo_files(args.repo)]
    lm = fit_lm(corpus, order=args.order, add_k=args.add_k)
    kept, records = filter_pairs(pairs, lm, args.threshold, args.report, context_first=not args.context_last)
    with open(args.out, "w", encoding="utf-8") as fh:
        for p in kept:
            fh.write(json.dumps({"prefix_id": p.prefix_id, "chunk_id": p.chunk_id,
                                 "completion_id": p.completion_id, "x": p.x, "c": p.c, "y": p.y}) + "\n")
    _print(args, {"pairs": len(records), "kept": len(kept)}, f"kept {len(kept)} of {len(records)} pairs")
    return EXIT_OK


def cmd_bench(args) -> int:
    spec = SyntheticSpec(args.repos, args.files, args.chunks, args.disjointness, args.seed)
    cfg = BenchConfig(synthetic=spec, dim=args.dim, branching=args.branching, K=int(args.K), queries=args.queries,
                      ef_search=args.ef_search, workers=args.workers, seed=args.seed)
    report = run_bench(cfg, progress=log.info)
    json_path = write_report(report, Path(args.out).with_suffix(".json"), "json")
    csv_path = write_report(report, Path(args.out).with_suffix(".csv"), "csv")
    if args.format == "json":
        print(json_path.read_text(encoding="utf-8"), end="")
    elif args.format == "csv":
        print(csv_path.read_text(encoding="utf-8"), end="")
    else:
        print(f"median {report.median_ms:.2f}ms p90 {report.p90_ms:.2f}ms p99 {report.p99_ms:.2f}ms "
              f"recall {report.recall:.4f} nodes {report.corpus['nodes']} -> {json_path}, {csv_path}")
    return EXIT_OK


def _tree_lines(cache, node_id: int, depth: int, max_depth: int, out: List[str]) -> None:
    node = cache.nodes[node_id]
    label = node.group_key or "/"
    if node.is_leaf:
        path, span = node.span_refs[0]
        label = f"{path}[{span[0]}:{span[1]}]"
    out.append(f"{'  ' * depth}L{node.level} {node.node_id:016x} {label} ({len(node.span_refs)} spans)")
    if depth < max_depth:
        for c in node.children:
            _tree_lines(cache, c, depth + 1, max_depth, out)


def cmd_inspect(args) -> int:
    cache = cache_mod.load(args.cache)
    cache_mod.validate(cache)
    m = cache.build_meta
    by_level = np.bincount(cache.levels())
    if args.format == "json":
        print(json.dumps({"repo_id": cache.repo_id, "nodes": m.node_count, "levels": m.level_count,
                          "branching": m.branching_factor, "dim": m.dim,
                          "nodes_per_level": by_level.tolist(), "indexed": cache.index is not None}))
        return EXIT_OK
    print(f"repo {cache.repo_id}: {m.node_count} nodes, {m.level_count} levels, b={m.branching_factor}, "
          f"dim={m.dim}, index={'yes' if cache.index is not None else 'no'}")
    print("nodes per level: " + ", ".join(f"L{i}={c}" for i, c in enumerate(by_level)))
    lines: List[str] = []
    _tree_lines(cache, cache.root_id, 0, args.depth, lines)
    print("\n".join(lines))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value file supplying defaults for any flag")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="hef", description="Hierarchical embedding caches for repository-level code context.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help_, formats=("text", "json")):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.add_argument("--format", choices=formats, default="text", help="stdout format")
        p.set_defaults(func=fn)
        return p

    def index_flags(p):
        p.add_argument("--ef-search", type=int, default=128)

    p = add("build", cmd_build, "chunk, embed, fuse and index a repository")
    p.add_argument("--repo", required=True)
    p.add_argument("--cache", required=True)
    p.add_argument("--dim", type=int, default=256)
    p.add_argument("--branching", type=int, default=8)
    p.add_argument("--fuser-params", help="trained fuser parameters (.npz); mean fusion otherwise")
    p.add_argument("--vectors", help="JSON lines of externally computed chunk vectors")
    index_flags(p)

    p = add("update", cmd_update, "re-embed changed files and refresh affected ancestors")
    p.add_argument("--repo", required=True)
    p.add_argument("--cache", required=True)
    p.add_argument("--changed", nargs="+", required=True, help="paths relative to --repo; missing files are deletions")
    p.add_argument("--fuser-params")
    index_flags(p)

    p = add("query", cmd_query, "emit a pseudo-token block for a prefix")
    p.add_argument("--cache", required=True)
    p.add_argument("--prefix-file", help="defaults to stdin")
    p.add_argument("-K", default="32", help="integer or preset name (%s)" % ", ".join(K_PRESETS))
    p.add_argument("--entities", action="store_true", help="attach entity names from the top hit's files")
    p.add_argument("--repo", help="repository root, needed with --entities")
    p.add_argument("--dedup", action="store_true", help="skip hits nested in a higher-ranked hit")
    p.add_argument("--projector", help="projector parameters (.npz)")
    p.add_argument("--d-hidden", type=int, default=128)
    p.add_argument("--d-g", type=int, default=64)
    p.add_argument("--out", default="block")
    index_flags(p)

    p = add("train-fuser", cmd_train_fuser, "contrastively train the attention fuser")
    p.add_argument("--repo", required=True, help="directory whose subdirectories are repositories")
    p.add_argument("--out", required=True)
    p.add_argument("--loss-csv")
    p.add_argument("--dim", type=int, default=256)
    p.add_argument("--branching", type=int, default=8)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--warmup", type=int, default=100)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--tau", type=float, default=0.07)
    p.add_argument("--d-f", type=int, default=64)
    p.add_argument("--holdout", type=float, default=0.2)

    p = add("uwl-filter", cmd_uwl_filter, "score and filter (prefix, context, completion) triples")
    p.add_argument("--pairs", required=True)
    p.add_argument("--repo", required=True, help="corpus for the reference n-gram model")
    p.add_argument("--threshold", type=float, default=0.55)
    p.add_argument("--order", type=int, default=3)
    p.add_argument("--add-k", type=float, default=0.5)
    p.add_argument("--context-last", action="store_true", help="condition on prefix then context")
    p.add_argument("--out", required=True)
    p.add_argument("--report", required=True)

    p = add("bench", cmd_bench, "offline cost and query latency on synthetic repositories",
            formats=("text", "json", "csv"))
    p.add_argument("--repos", type=int, default=4)
    p.add_argument("--files", type=int, default=50)
    p.add_argument("--chunks", type=int, default=8)
    p.add_argument("--disjointness", type=float, default=0.9)
    p.add_argument("--queries", type=int, default=200)
    p.add_argument("--dim", type=int, default=256)
    p.add_argument("--branching", type=int, default=8)
    p.add_argument("-K", type=int, default=32)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True, help="report path; .json and .csv files are written")
    index_flags(p)

    p = add("inspect", cmd_inspect, "summarize a cache file")
    p.add_argument("--cache", required=True)
    p.add_argument("--depth", type=int, default=2)
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv: Sequence[str]) -> argparse.Namespace:
    # read --config before the real parse so config values can satisfy required flags
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    subs = parser._subparsers._group_actions[0].choices
    command = next((a for a in argv if a in subs), None)
    if not known.config or command is None:
        return parser.parse_args(argv)
    values = read_config(known.config)
    sub = subs[command]
    actions = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, raw in values.items():
        if key not in actions or key in ("help", "config"):
            raise ConfigError(f"{known.config}: unknown key {key!r} for {command}")
        action = actions[key]
        if isinstance(action, argparse._StoreTrueAction):
            defaults[key] = raw.lower() in ("1", "true", "yes", "on")
        elif action.type is not None:
            try:
                defaults[key] = action.type(raw)
            except ValueError as exc:
                raise ConfigError(f"{known.config}: bad value for {key}: {raw!r}") from exc
        else:
            defaults[key] = raw
        action.required = False
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = _apply_config(parser, argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except Exception as exc:  # mapped to a category exit code below
        for types, code in EXIT_CODES:
            if isinstance(exc, types):
                print(f"hef: error: {exc}", file=sys.stderr)
                return code
        if isinstance(exc, OSError):
            print(f"hef: error: {exc}", file=sys.stderr)
            return EXIT_MISSING
        raise


if __name__ == "__main__":
    sys.exit(main())
