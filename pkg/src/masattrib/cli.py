"""Command-line front end.

    masattrib attribute         --config query.yaml [--cache PATH] [--out DIR] [--jobs N] [--seed-override 0,1]
    masattrib delete-curve      --config query.yaml --k-max K
    masattrib compare-protocols --config query.yaml

Exit codes: 0 success, 2 config error, 3 evaluation error. Reports land in
``<out>/<query-digest>/``; per-run statistics go to stdout only, so a warm
rerun rewrites byte-identical report files.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import platform
import sys
from pathlib import Path
from typing import Optional

import networkx
import numpy
import scipy

from . import __version__
from .cache import CacheError, CacheStore
from .config import ConfigError, Query, load_document, parse_query, query_digest
from .game import Coalition
from .kernels import KernelError, KernelSpec, attribute, required_coalitions
from .llm import LLMError, PricingError
from .metrics import MetricsError, agreement, cost_summary, deletion_curve, normalized_entropy, spearman
from .protocols import JudgeError, NonExecutableCoalitionError
from .utility import CoalitionValues, EvaluationError

logger = logging.getLogger("masattrib")

EXIT_OK, EXIT_CONFIG, EXIT_EVAL = 0, 2, 3
EVAL_ERRORS = (EvaluationError, JudgeError, NonExecutableCoalitionError, LLMError, CacheError, OSError)


def _dump_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, allow_nan=False) + "\n", encoding="utf-8")


def _dump_csv(path: Path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    path.write_text(buf.getvalue(), encoding="utf-8")


def _load(config_path, seed_override: Optional[str]) -> Query:
    doc = load_document(config_path)
    if seed_override is not None:
        try:
            doc["seeds"] = [int(s) for s in str(seed_override).split(",") if s.strip()]
        except ValueError:
            raise ConfigError("--seed-override", "expected comma-separated integers") from None
    return parse_query(doc, Path(config_path).parent)


class _Run:
    """Shared plumbing for one command invocation."""

    def __init__(self, command: str, config_path, cache=None, out=None, jobs=None, seed_override=None, extra=None):
        self.command = command
        self.q = _load(config_path, seed_override)
        self.jobs = jobs or self.q.jobs
        self.cache_path = cache or self.q.cache
        self.extra = extra or {}
        self.digest = query_digest(self.q.effective, command, self.extra)
        outdir = Path(out or self.q.out or "reports")
        self.dir = outdir / self.digest
        self.store: Optional[CacheStore] = None
        self.files: list = []

    def open(self):
        self.store = CacheStore(self.cache_path)
        return self

    def close(self):
        if self.store is not None:
            self.store.close()

    def kw(self) -> dict:
        return {"store": self.store, "policy": self.q.policy, "jobs": self.jobs}

    def write_json(self, name, payload):
        self.dir.mkdir(parents=True, exist_ok=True)
        _dump_json(self.dir / name, payload)
        self.files.append(name)

    def write_csv(self, name, header, rows):
        self.dir.mkdir(parents=True, exist_ok=True)
        _dump_csv(self.dir / name, header, rows)
        self.files.append(name)

    def write_manifest(self):
        self.write_json("manifest.json", {
            "command": self.command,
            "query_digest": self.digest,
            "effective_config": self.q.effective,
            "run": {**self.extra, "cache": None if self.cache_path is None else str(self.cache_path),
                    "jobs": self.jobs},
            "seeds": {"evaluation": list(self.q.spec.seeds), "kernel": self.q.kernel.seed},
            "files": sorted(set(self.files) | {"manifest.json"}),
            "versions": {"masattrib": __version__, "python": platform.python_version(),
                         "numpy": numpy.__version__, "scipy": scipy.__version__,
                         "networkx": networkx.__version__},
        })

    def report(self):
        stats = {"command": self.command, "query_digest": self.digest, "out": str(self.dir),
                 "evaluator_calls": self.store.evaluations, "cache_entries": len(self.store)}
        print(json.dumps(stats, sort_keys=True))


def _attribution(run: _Run, protocol_cfg=None):
    p = protocol_cfg or run.q.protocol_cfg
    return attribute(run.q.kernel, p["game"], p["vector"], run.q.spec, **run.kw())


def _write_attribution(run: _Run, result):
    q = run.q
    ledger = cost_summary(result.entries, q.pricing)
    run.write_json("attribution.json", {"query_digest": run.digest, "result": result.to_dict(),
                                        "cost_summary": ledger})
    rank = {i: r + 1 for r, i in enumerate(result.ranking())}
    run.write_csv("attribution.csv", ["agent", "score", "rank"],
                  [[a, repr(s), rank[i]] for i, (a, s) in enumerate(zip(result.agents, result.scores))])


def _guarded(fn):
    def wrapper(*args, **kwargs) -> int:
        try:
            return fn(*args, **kwargs)
        except (ConfigError, KernelError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        except (MetricsError, PricingError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_EVAL
        except EVAL_ERRORS as exc:
            print(f"evaluation error: {exc}", file=sys.stderr)
            return EXIT_EVAL
    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


@_guarded
def cmd_attribute(config_path, *, cache=None, out=None, jobs=None, seed_override=None) -> int:
    """Attribute the query and write attribution.json/.csv plus manifest.json."""
    run = _Run("attribute", config_path, cache, out, jobs, seed_override).open()
    try:
        result = _attribution(run)
        _write_attribution(run, result)
        run.write_manifest()
        run.report()
    finally:
        run.close()
    return EXIT_OK


@_guarded
def cmd_delete_curve(config_path, k_max=None, *, cache=None, out=None, jobs=None, seed_override=None) -> int:
    """Rank agents once, then apply the protocol to the bottom-k for k = 0..k_max."""
    q = _load(config_path, seed_override)
    n = q.game.n
    k_max = n if k_max is None else int(k_max)
    if not 0 <= k_max <= n:
        raise ConfigError("--k-max", f"must lie in [0, {n}], got {k_max}")
    run = _Run("delete-curve", config_path, cache, out, jobs, seed_override, {"k_max": k_max}).open()
    try:
        result = _attribution(run)
        _write_attribution(run, result)
        p = run.q.protocol_cfg
        curve = deletion_curve(p["game"], result, p["vector"], run.q.spec, k_max, **run.kw())
        run.write_csv("curve.csv", ["k", "utility", "tokens"],
                      [[pt.k, repr(pt.utility), pt.billable_tokens] for pt in curve.points])
        payload = curve.to_dict()
        payload["order_labels"] = [run.q.game.labels[i] for i in curve.order]
        run.write_json("curve.json", payload)
        run.write_manifest()
        run.report()
    finally:
        run.close()
    return EXIT_OK


@_guarded
def cmd_compare_protocols(config_path, *, cache=None, out=None, jobs=None, seed_override=None) -> int:
    """Pair coalition values of two protocols; the first is the reference (ground truth)."""
    run = _Run("compare-protocols", config_path, cache, out, jobs, seed_override)
    q = run.q
    if len(q.compare) != 2:
        raise ConfigError("compare.protocols", "compare-protocols needs two protocols")
    sets = [p.get("coalitions") for p in q.compare]
    if sets[0] != sets[1]:
        raise ConfigError("compare.protocols", "the two protocols are evaluated on different coalition sets")
    masks = sets[0]
    if masks is None:
        kernel = q.kernel if q.kernel.kind != "shapley_sampled" else KernelSpec("shapley_exact")
        masks = required_coalitions(kernel, q.game.n)
    run.open()
    try:
        columns = []
        for p in q.compare:
            vals = CoalitionValues(p["game"], p["vector"], q.spec, **run.kw())
            vals.fetch(masks)
            columns.append([vals.value(m) for m in masks])
        ref, cand = columns
        flags = []
        try:
            rep = agreement(cand, ref).to_dict()
            if rep["r_squared"] < 0:
                flags.append("r_squared_negative")
        except MetricsError as exc:
            rep = {"r_squared": None, "spearman_rho": None, "paired": len(masks), "reason": str(exc)}
            flags.append("r_squared_undefined")
        if rep.get("spearman_rho") is None:
            rep["spearman_rho"] = spearman(cand, ref)
            if rep["spearman_rho"] is None:
                flags.append("spearman_undefined")
        rows = []
        for p in q.compare:
            res = _attribution(run, p)
            try:
                h = normalized_entropy(res)
            except MetricsError:
                h = None
            rows.append({"protocol": p["effective"], "summary": res.protocol, "scores": list(res.scores),
                         "normalized_entropy": h})
        labels = q.game.labels
        run.write_json("agreement.json", {
            "query_digest": run.digest,
            "kernel": q.kernel.to_dict(),
            "coalitions": [{"mask": m, "members": [labels[i] for i in Coalition(m, q.game.n).members],
                            "reference": r, "candidate": c} for m, r, c in zip(masks, ref, cand)],
            "agreement": rep,
            "flags": flags,
            "entropy": rows,
        })
        run.write_manifest()
        run.report()
    finally:
        run.close()
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="masattrib", description="Cooperative-game attribution for multi-agent systems")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in (("attribute", "compute per-agent attribution scores"),
                           ("delete-curve", "bottom-k deletion curve and AUC"),
                           ("compare-protocols", "agreement between two removal protocols")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", required=True, help="query document (YAML or JSON)")
        p.add_argument("--cache", help="coalition cache log (default: in-memory)")
        p.add_argument("--out", help="output root directory (default: ./reports)")
        p.add_argument("--jobs", type=int, help="concurrent coalition evaluations")
        p.add_argument("--seed-override", help="comma-separated evaluation seeds replacing the config's list")
        if name == "delete-curve":
            p.add_argument("--k-max", type=int, help="largest number of removals (default: all agents)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    common = dict(cache=args.cache, out=args.out, jobs=args.jobs, seed_override=args.seed_override)
    if args.command == "attribute":
        return cmd_attribute(args.config, **common)
    if args.command == "delete-curve":
        return cmd_delete_curve(args.config, args.k_max, **common)
    return cmd_compare_protocols(args.config, **common)


if __name__ == "__main__":
    sys.exit(main())
