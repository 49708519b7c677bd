"""Named experiment grids, each the analogue of one study in the evaluation.

A scenario expands its parameters into grid points, evaluates the points
(optionally on a process pool), merges rows in grid order and derives the
metrics that the expectations file checks.
"""

from __future__ import annotations

import csv
import io
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path
from statistics import mean
from typing import Any, Callable

import yaml

from .compiler import CompileOptions, Stage, build_commands
from .config import ConfigError, default_hardware, get_model
from .engine import RunOptions, run, run_multi_device

OUT_ENV = "IANUS_OUT_DIR"

_DECODER_SKIP = ("lm_head", "embedding")


class ScenarioError(ValueError):
    pass


def parse_io(text: str) -> tuple[int, int]:
    try:
        a, b = text.split(":")
        return int(a), int(b)
    except ValueError:
        raise ScenarioError(f"token pair {text!r} must look like INPUT:OUTPUT") from None


def _ms(ns: float) -> float:
    return round(ns / 1e6, 6)


def _decoder_ns(rep) -> float:
    return sum(v for k, v in rep.breakdown["total"].items() if k not in _DECODER_SKIP)


# ---------------------------------------------------------------------------
# grid points (module level so worker processes can pickle them)


def _pt_latency(p: dict) -> list[dict]:
    m = get_model(p["model"], p["input"], p["output"])
    rep = run(m, default_hardware(p["mode"]))
    return [{"model": m.name, "input": m.input_tokens, "output": m.output_tokens, "mode": p["mode"],
             "total_ms": _ms(rep.total_ns), "summarization_ms": _ms(rep.stages["summarization"]),
             "generation_ms": _ms(rep.stages["generation"]), "per_token_ms": _ms(rep.per_token_ns)}]


_VARIANTS = {
    "unified": ("unified", RunOptions()),
    "unified-naive": ("unified", RunOptions(naive=True)),
    "unified-pim-qkt": ("unified", RunOptions(attention="gen_pim_qkt")),
    "partitioned": ("partitioned", RunOptions()),
    "partitioned-naive": ("partitioned", RunOptions(naive=True)),
}


def _pt_compare(p: dict) -> list[dict]:
    mode, opts = _VARIANTS[p["variant"]]
    m = get_model(p["model"], p["input"], p["output"])
    rep = run(m, default_hardware(mode), opts)
    return [{"model": m.name, "input": m.input_tokens, "output": m.output_tokens, "variant": p["variant"],
             "mode": mode, "total_ms": _ms(rep.total_ns)}]


def _pt_breakdown(p: dict) -> list[dict]:
    m = get_model(p["model"], p["input"], p["output"])
    rep = run(m, default_hardware(p["mode"]))
    rows = []
    for stage, b in rep.breakdown.items():
        for cls in sorted(b):
            rows.append({"model": m.name, "mode": p["mode"], "stage": stage, "class": cls, "ms": _ms(b[cls])})
    return rows


def _pt_energy(p: dict) -> list[dict]:
    m = get_model(p["model"], p["input"], p["output"])
    hw = default_hardware(p["mode"])
    rep = run(m, hw)
    e = rep.energy
    return [{"model": m.name, "mode": p["mode"], "core_compute_mj": round(e["core_compute"] * 1e3, 6),
             "normal_mem_mj": round(e["normal_mem"] * 1e3, 6), "pim_ops_mj": round(e["pim_ops"] * 1e3, 6),
             "total_mj": round(e["total"] * 1e3, 6),
             "pim_op_per_read": round(hw.energy.e_pim_op / hw.energy.e_dram_read, 9)}]


def _pt_adaptive(p: dict) -> list[dict]:
    m = get_model(p["model"], p["n"], 1)
    hw = default_hardware("unified")
    sp = build_commands(m, hw, Stage.summarization(m), CompileOptions(blocks=1))
    t = {f: run(m, hw, RunOptions(fc_mapping=f)).total_ns for f in ("mu", "pim", "auto")}
    row = {"model": m.name, "n": p["n"]}
    for cls in ("fc_qkv", "fc_proj", "ffn", "lm_head"):
        row[f"map_{cls}"] = sp.mapping.get(cls, "-")
    best = min(t["mu"], t["pim"])
    row.update({"mu_only_ms": _ms(t["mu"]), "pim_only_ms": _ms(t["pim"]), "adaptive_ms": _ms(t["auto"]),
                "adaptive_vs_best": round(t["auto"] / best, 6)})
    return [row]


def _pt_sensitivity(p: dict) -> list[dict]:
    m = get_model(p["model"], p["input"], p["output"])
    hw = replace(default_hardware("unified"), num_cores=p["cores"], pim_chips=p["pim_chips"])
    rep = run(m, hw, check_capacity=False)
    return [{"model": m.name, "input": m.input_tokens, "output": m.output_tokens, "cores": p["cores"],
             "pim_chips": p["pim_chips"], "total_ms": _ms(rep.total_ns)}]


def _pt_scaling(p: dict) -> list[dict]:
    m = get_model(p["model"], p["input"], p["output"])
    n = p["devices"]
    # a single device cannot hold the larger models, so it is modeled unbounded
    rep = run_multi_device(m, default_hardware("unified"), n, check_capacity=n > 1)
    return [{"model": m.name, "input": m.input_tokens, "output": m.output_tokens, "devices": n,
             "total_ms": _ms(rep.total_ns), "link_bytes": int(rep.counters["link_bytes"])}]


# ---------------------------------------------------------------------------
# grids and metrics


def _pairs(p: dict) -> list[tuple[int, int]]:
    return [parse_io(x) for x in p["io"]]


def _grid_latency(p):
    return [{"model": m, "input": i, "output": o, "mode": mode}
            for m in p["models"] for i, o in _pairs(p) for mode in p["modes"]]


def _grid_compare(p):
    return [{"model": m, "input": i, "output": o, "variant": v}
            for m in p["models"] for i, o in _pairs(p) for v in _VARIANTS]


def _grid_breakdown(p):
    return [{"model": m, "input": i, "output": o, "mode": mode}
            for m in p["models"] for i, o in _pairs(p) for mode in p["modes"]]


def _grid_energy(p):
    return [{"model": m, "input": i, "output": o, "mode": mode}
            for m in p["models"] for i, o in _pairs(p) for mode in ("plain", "unified")]


def _grid_adaptive(p):
    return [{"model": m, "n": n} for m in p["models"] for n in p["tokens"]]


def _grid_sensitivity(p):
    cores = sorted(set(p["cores"]) | {4})
    chips = sorted(set(p["pim_chips"]) | {4})
    return [{"model": m, "input": i, "output": o, "cores": c, "pim_chips": k}
            for m in p["models"] for i, o in _pairs(p) for c in cores for k in chips
            if c == 4 or k == 4]


def _grid_scaling(p):
    devs = sorted(set(p["devices"]) | {1})
    return [{"model": m, "input": i, "output": o, "devices": d}
            for m in p["models"] for i, o in _pairs(p) for d in devs]


def _metrics_none(rows, p):
    return {}


def _metrics_compare(rows, p):
    t = {(r["model"], r["input"], r["output"], r["variant"]): r["total_ms"] for r in rows}
    keys = sorted({k[:3] for k in t})
    for r in rows:
        r["speedup_vs_partitioned_naive"] = round(t[(r["model"], r["input"], r["output"], "partitioned-naive")]
                                                  / r["total_ms"], 6)
    uvp = [t[k + ("partitioned",)] / t[k + ("unified",)] for k in keys]
    pg = [t[k + ("partitioned-naive",)] / t[k + ("partitioned",)] for k in keys]
    ug = [t[k + ("unified-naive",)] / t[k + ("unified",)] for k in keys]
    mq = [t[k + ("unified-pim-qkt",)] / t[k + ("unified",)] for k in keys]
    return {"unified_vs_partitioned_min": min(uvp), "unified_vs_partitioned_max": max(uvp),
            "partitioned_sched_gain_min": min(pg), "unified_sched_gain_mean": mean(ug),
            "mu_qkt_vs_pim_qkt_min": min(mq)}


def _metrics_breakdown(rows, p):
    tot: dict[str, dict[str, float]] = {}
    for r in rows:
        if r["stage"] == "total":
            tot.setdefault(r["mode"], {})[r["class"]] = r["ms"]
    if not {"plain", "unified"} <= set(tot):
        return {}
    pl, un = tot["plain"], tot["unified"]

    def dec(b):
        return sum(v for k, v in b.items() if k not in _DECODER_SKIP)

    ffn = pl.get("ffn", 0.0) / un["ffn"]
    # the two attention FCs: QKV generation and the output projection
    qkv = (pl.get("fc_qkv", 0.0) + pl.get("fc_proj", 0.0)) / (un.get("fc_qkv", 0.0) + un.get("fc_proj", 0.0))
    return {"decoder_speedup": dec(pl) / dec(un), "ffn_speedup": ffn, "qkv_fc_speedup": qkv,
            "ffn_over_qkv_fc": ffn / qkv}


def _metrics_energy(rows, p):
    e = {(r["model"], r["mode"]): r for r in rows}
    models = sorted({m for m, _ in e})
    nm = [e[m, "plain"]["normal_mem_mj"] / e[m, "unified"]["normal_mem_mj"] for m in models]
    tg = [e[m, "plain"]["total_mj"] / e[m, "unified"]["total_mj"] for m in models]
    return {"pim_op_per_read": rows[0]["pim_op_per_read"], "normal_mem_reduction_min": min(nm),
            "total_gain_min": min(tg), "total_gain_max": max(tg)}


def _metrics_adaptive(rows, p):
    out: dict[str, Any] = {}
    for r in rows:
        for short, cls in (("qkv", "fc_qkv"), ("proj", "fc_proj"), ("ffn", "ffn")):
            out[f"{r['model']}_n{r['n']}_{short}"] = r[f"map_{cls}"]
    return out


def _metrics_sensitivity(rows, p):
    t = {(r["model"], r["input"], r["output"], r["cores"], r["pim_chips"]): r["total_ms"] for r in rows}
    for r in rows:
        r["normalized"] = round(r["total_ms"] / t[(r["model"], r["input"], r["output"], 4, 4)], 6)
    pairs = sorted({(r["input"], r["output"]) for r in rows}, key=lambda x: x[1])
    if len(pairs) < 2:
        return {}
    (si, so), (li, lo) = pairs[0], pairs[-1]
    c = min(r["cores"] for r in rows)
    k = min(r["pim_chips"] for r in rows)
    out = {}
    for m in sorted({r["model"] for r in rows}):
        base_s, base_l = t[m, si, so, 4, 4], t[m, li, lo, 4, 4]
        if c < 4:
            out["cores_hurt_short_more"] = t[m, si, so, c, 4] / base_s - t[m, li, lo, c, 4] / base_l
        if k < 4:
            out["chips_hurt_long_more"] = t[m, li, lo, 4, k] / base_l - t[m, si, so, 4, k] / base_s
    return out


def _metrics_scaling(rows, p):
    t = {(r["model"], r["input"], r["output"], r["devices"]): r for r in rows}
    for r in rows:
        base = t[(r["model"], r["input"], r["output"], 1)]["total_ms"]
        r["speedup"] = round(base / r["total_ms"], 6)
        r["efficiency"] = round(r["speedup"] / r["devices"], 6)
    top = max(r["devices"] for r in rows)
    if top == 1:
        return {}
    best = [r for r in rows if r["devices"] == top]
    return {"speedup_max_devices": min(r["speedup"] for r in best),
            "efficiency_max_devices": max(r["efficiency"] for r in best)}


@dataclass(frozen=True)
class Scenario:
    name: str
    title: str
    defaults: dict
    grid: Callable[[dict], list[dict]]
    point: Callable[[dict], list[dict]]
    metrics: Callable[[list[dict], dict], dict]


SCENARIOS: dict[str, Scenario] = {s.name: s for s in (
    Scenario("e2e-latency", "end-to-end latency", {"models": ["gpt2-m", "gpt2-l", "gpt2-xl"],
             "io": ["128:1", "128:8", "256:64"], "modes": ["unified"]},
             _grid_latency, _pt_latency, _metrics_none),
    Scenario("compare-modes", "unified vs partitioned", {"models": ["gpt2-m", "gpt2-l", "gpt2-xl"],
             "io": ["256:512"]}, _grid_compare, _pt_compare, _metrics_compare),
    Scenario("breakdown", "latency breakdown", {"models": ["gpt2-xl"], "io": ["256:512"],
             "modes": ["plain", "unified"]}, _grid_breakdown, _pt_breakdown, _metrics_breakdown),
    Scenario("energy", "dynamic energy", {"models": ["gpt2-m", "gpt2-l", "gpt2-xl"], "io": ["256:512"]},
             _grid_energy, _pt_energy, _metrics_energy),
    Scenario("adaptive-map", "adaptive FC mapping", {"models": ["gpt2-m", "gpt2-l", "gpt2-xl", "gpt2-2.5b"],
             "tokens": [4, 8, 16]}, _grid_adaptive, _pt_adaptive, _metrics_adaptive),
    Scenario("sensitivity", "cores and PIM chips", {"models": ["gpt2-m"], "io": ["256:1", "256:512"],
             "cores": [1, 2, 4], "pim_chips": [1, 2, 4]}, _grid_sensitivity, _pt_sensitivity,
             _metrics_sensitivity),
    Scenario("scaling", "multi-device scaling", {"models": ["gpt-6.7b"], "io": ["256:64"], "devices": [1, 2, 4]},
             _grid_scaling, _pt_scaling, _metrics_scaling),
)}


# ---------------------------------------------------------------------------
# running


def load_expectations(path: str | Path | None = None) -> dict:
    if path is None:
        text = resources.files("ianus").joinpath("expectations.yaml").read_text()
    else:
        text = Path(path).read_text()
    data = yaml.safe_load(text) or {}
    if not isinstance(data, dict):
        raise ScenarioError("expectations file must be a mapping")
    return data


def check(value: Any, rule: dict) -> bool:
    for op, lim in rule.items():
        if op == "equals":
            ok = value == lim if isinstance(lim, str) else abs(float(value) - float(lim)) <= 1e-9 * max(1.0, abs(lim))
        elif op == "min":
            ok = value >= lim
        elif op == "max":
            ok = value <= lim
        elif op == "gt":
            ok = value > lim
        elif op == "lt":
            ok = value < lim
        else:
            raise ScenarioError(f"unknown threshold operator {op!r}")
        if not ok:
            return False
    return True


def resolve_params(sc: Scenario, overrides: dict | None) -> dict:
    p = {k: list(v) for k, v in sc.defaults.items()}
    for k, v in (overrides or {}).items():
        if v is None:
            continue
        if k not in p:
            raise ScenarioError(f"scenario {sc.name!r} takes no {k!r} override; valid: {', '.join(p)}")
        if not v:
            raise ScenarioError(f"override {k!r} is empty")
        p[k] = list(v)
    for k in ("io",):
        for x in p.get(k, []):
            parse_io(x)
    try:
        for m in p.get("models", []):
            get_model(m)
    except ConfigError as e:
        raise ScenarioError(str(e)) from None
    return p


def rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    if not rows:
        return ""
    cols: list[str] = []
    for r in rows:
        cols.extend(k for k in r if k not in cols)
    w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n", restval="")
    w.writeheader()
    for r in rows:
        w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


@dataclass
class ScenarioResult:
    name: str
    params: dict
    rows: list[dict]
    metrics: dict
    checks: dict[str, str]  # metric -> pass / fail / skipped
    csv_path: Path | None = None
    summary_path: Path | None = None

    @property
    def passed(self) -> bool:
        return all(v != "fail" for v in self.checks.values())

    def summary(self) -> dict:
        return {"scenario": self.name, "params": self.params,
                "metrics": {k: (round(v, 6) if isinstance(v, float) else v) for k, v in self.metrics.items()},
                "checks": self.checks, "passed": self.passed}


def _evaluate(args: tuple[str, dict]) -> list[dict]:
    name, point = args
    return SCENARIOS[name].point(point)


def run_scenario(name: str, overrides: dict | None = None, *, out_dir: str | Path | None = None,
                 workers: int = 1, explore: bool = False, expectations: dict | None = None) -> ScenarioResult:
    """Evaluate a scenario grid, write ``<name>.csv`` and ``<name>.summary.json``."""
    if name not in SCENARIOS:
        raise ScenarioError(f"unknown scenario {name!r}; choose from {', '.join(SCENARIOS)}")
    sc = SCENARIOS[name]
    params = resolve_params(sc, overrides)
    points = sc.grid(params)
    jobs = [(name, pt) for pt in points]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as ex:
            chunks = list(ex.map(_evaluate, jobs))
    else:
        chunks = [_evaluate(j) for j in jobs]
    rows = [r for c in chunks for r in c]
    metrics = sc.metrics(rows, params)
    checks: dict[str, str] = {}
    if not explore:
        exp = expectations if expectations is not None else load_expectations()
        for metric, rule in (exp.get(name) or {}).items():
            if metric not in metrics:
                checks[metric] = "skipped"
            else:
                checks[metric] = "pass" if check(metrics[metric], rule) else "fail"
    res = ScenarioResult(name, params, rows, metrics, checks)
    out = Path(out_dir or os.environ.get(OUT_ENV) or "ianus_out")
    out.mkdir(parents=True, exist_ok=True)
    res.csv_path = out / f"{name}.csv"
    res.summary_path = out / f"{name}.summary.json"
    res.csv_path.write_text(rows_to_csv(rows))
    res.summary_path.write_text(json.dumps(res.summary(), indent=2, sort_keys=True) + "\n")
    return res
