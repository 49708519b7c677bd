"""Command-line entry point: ``ianus compile | simulate | run | validate-trace | dump-allocation``."""

from __future__ import annotations

import argparse
import csv
import io
import os
import sys
from pathlib import Path

from .compiler import CompileError, CompileOptions, Stage, build_commands
from .config import ConfigError, default_hardware, get_model, load_config
from .engine import RunOptions, run_multi_device
from .memmap import AllocationError, plan_allocation
from .pim import dump_trace, parse_trace, validate_trace
from .scenarios import OUT_ENV, SCENARIOS, ScenarioError, load_expectations, parse_io, run_scenario


def _csv_list(text: str) -> list[str]:
    return [x.strip() for x in text.split(",") if x.strip()]


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in _csv_list(text)]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _hardware(args) -> object:
    if getattr(args, "config", None):
        hw, _ = load_config(args.config)
        return hw.with_mode(args.mode) if args.mode else hw
    return default_hardware(args.mode or "unified")


def _model(args):
    i, o = parse_io(args.tokens) if args.tokens else (None, None)
    return get_model(args.model, i, o)


def _add_model_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", default="gpt2-m", help="preset name or YAML file (default gpt2-m)")
    p.add_argument("--tokens", metavar="IN:OUT", help="input and output token counts, e.g. 128:8")
    p.add_argument("--mode", choices=("unified", "partitioned", "plain"), help="memory mode (default unified)")
    p.add_argument("--config", help="YAML file with a hardware section")


def _out_path(name: str) -> Path:
    return Path(os.environ.get(OUT_ENV) or ".") / name if not os.path.isabs(name) else Path(name)


def cmd_compile(args) -> int:
    model, hw = _model(args), _hardware(args)
    stage = Stage.summarization(model) if args.stage == "summarization" else Stage.generation(model, args.step)
    opts = CompileOptions(attention=args.attention, naive=args.naive, blocks=args.blocks,
                          n_devices=args.devices, fc_mapping=args.fc_mapping)
    plan = plan_allocation(model, hw, n_devices=args.devices, check_capacity=False)
    sp = build_commands(model, hw, stage, opts, plan)
    if args.emit_plan:
        text = sp.emit_plan()
        if args.emit_plan == "-":
            sys.stdout.write(text)
        else:
            Path(args.emit_plan).write_text(text)
    kinds: dict[str, int] = {}
    for c in sp.commands:
        kinds[c.kind.value] = kinds.get(c.kind.value, 0) + 1
    if args.emit_plan != "-":
        print(f"{stage.label}: {len(sp.commands)} commands over {sp.blocks} block(s), "
              f"attention {sp.attention.variant.value}")
        for k in sorted(kinds):
            print(f"  {k:<10}{kinds[k]:>8}")
        for cls, where in sorted(sp.mapping.items()):
            print(f"  {cls:<10}{where:>8}")
    return 0


def cmd_simulate(args) -> int:
    model, hw = _model(args), _hardware(args)
    opts = RunOptions(attention=args.attention, naive=args.naive, fc_mapping=args.fc_mapping,
                      exact=args.exact, trace=bool(args.trace))
    sink: list | None = [] if args.trace else None
    rep = run_multi_device(model, hw, args.devices, opts, check_capacity=not args.unbounded, trace_sink=sink)
    text = {"text": rep.to_text, "json": lambda: rep.to_json() + "\n", "csv": rep.to_csv}[args.format]()
    if args.out:
        _out_path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    if sink is not None:
        _write_trace(sink, hw, _out_path(args.trace))
    return 0


def _write_trace(results, hw, path: Path) -> None:
    # stages are simulated from t=0 each; lay them end to end with a settle gap
    gap = 4 * max(hw.timing.cycles(n) for n in ("tRAS", "tRP", "tWR", "tRCDRD"))
    parts, base = [], 0
    for r in results:
        recs = sorted(r.trace, key=lambda x: x.cycle)
        shifted = [type(x)(x.cycle + base, x.channel, x.bank, x.kind, x.row, x.column) for x in recs]
        parts.append(dump_trace(shifted))
        last = max((x.cycle for x in recs), default=0)
        base += last + gap
    path.write_text("".join(parts))


def cmd_run(args) -> int:
    overrides = {"models": args.models, "io": args.io, "tokens": args.tokens, "modes": args.modes,
                 "cores": args.cores, "pim_chips": args.pim_chips, "devices": args.devices}
    exp = load_expectations(args.expectations) if args.expectations else None
    res = run_scenario(args.scenario, overrides, out_dir=args.out, workers=args.workers,
                       explore=args.explore, expectations=exp)
    print(f"{res.name}: {len(res.rows)} rows -> {res.csv_path}")
    for k, v in res.metrics.items():
        status = res.checks.get(k, "-")
        shown = f"{v:.4f}" if isinstance(v, float) else str(v)
        print(f"  {k:<32}{shown:>12}  {status}")
    for k, v in res.checks.items():
        if k not in res.metrics:
            print(f"  {k:<32}{'':>12}  {v}")
    print(f"summary -> {res.summary_path}")
    return 0 if res.passed else 1


def cmd_validate_trace(args) -> int:
    hw = _hardware(args)
    recs = parse_trace(Path(args.file).read_text())
    bad = validate_trace(recs, hw)
    for v in bad[: args.limit]:
        print(v)
    print(f"{len(recs)} commands, {len(bad)} violation(s)")
    return 1 if bad else 0


def cmd_dump_allocation(args) -> int:
    model, hw = _model(args), _hardware(args)
    plan = plan_allocation(model, hw, n_devices=args.devices, check_capacity=not args.unbounded)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["name", "region", "nbytes", "plain_start", "base_row", "tiles", "channels", "duplicated", "npu_only"])
    for name, p in plan.placements.items():
        tm = p.tile_map
        w.writerow([name, p.region, p.nbytes, "" if p.plain_start is None else p.plain_start,
                    "" if tm is None else tm.base_row, "" if tm is None else tm.num_tiles,
                    "" if tm is None else " ".join(map(str, tm.channels)), int(p.duplicated), int(p.npu_only)])
    if args.out:
        _out_path(args.out).write_text(buf.getvalue())
    else:
        sys.stdout.write(buf.getvalue())
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ianus", description="NPU + PIM unified-memory performance simulator")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("compile", help="lower one stage into per-core command streams")
    _add_model_args(p)
    p.add_argument("--stage", choices=("summarization", "generation"), default="summarization")
    p.add_argument("--step", type=int, default=1, help="generation step (from 1)")
    p.add_argument("--blocks", type=int, help="compile only the first k decoder blocks")
    p.add_argument("--devices", type=int, default=1)
    p.add_argument("--attention", choices=("gen_mu_qkt", "gen_pim_qkt"))
    p.add_argument("--naive", action="store_true", help="serialize each core's stream")
    p.add_argument("--fc-mapping", choices=("auto", "mu", "pim"), default="auto")
    p.add_argument("--emit-plan", metavar="FILE", help="write the command listing ('-' for stdout)")
    p.set_defaults(func=cmd_compile)

    p = sub.add_parser("simulate", help="simulate a full inference")
    _add_model_args(p)
    p.add_argument("--devices", type=int, default=1)
    p.add_argument("--attention", choices=("gen_mu_qkt", "gen_pim_qkt"))
    p.add_argument("--naive", action="store_true")
    p.add_argument("--fc-mapping", choices=("auto", "mu", "pim"), default="auto")
    p.add_argument("--exact", action="store_true", help="simulate every block and step, no extrapolation")
    p.add_argument("--unbounded", action="store_true", help="skip the capacity check")
    p.add_argument("--format", choices=("text", "json", "csv"), default="text")
    p.add_argument("--out", help="write the report here instead of stdout")
    p.add_argument("--trace", metavar="FILE", help="run the cycle-level channel model and dump its DRAM trace")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("run", help="run a named scenario grid")
    p.add_argument("scenario", choices=sorted(SCENARIOS))
    p.add_argument("--models", type=_csv_list)
    p.add_argument("--io", type=_csv_list, help="token pairs, e.g. 128:1,256:512")
    p.add_argument("--tokens", type=_int_list, help="token counts (adaptive-map)")
    p.add_argument("--modes", type=_csv_list)
    p.add_argument("--mode", dest="modes", type=_csv_list, help=argparse.SUPPRESS)
    p.add_argument("--model", dest="models", type=_csv_list, help=argparse.SUPPRESS)
    p.add_argument("--cores", type=_int_list)
    p.add_argument("--pim-chips", type=_int_list)
    p.add_argument("--devices", type=_int_list)
    p.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    p.add_argument("--explore", action="store_true", help="disable regression thresholds")
    p.add_argument("--expectations", help="alternative expectations YAML")
    p.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./ianus_out)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("validate-trace", help="check a DRAM command trace against the timing rules")
    p.add_argument("file")
    p.add_argument("--config")
    p.add_argument("--mode", choices=("unified", "partitioned", "plain"))
    p.add_argument("--limit", type=int, default=20, help="violations to print")
    p.set_defaults(func=cmd_validate_trace)

    p = sub.add_parser("dump-allocation", help="CSV of where every parameter lives")
    _add_model_args(p)
    p.add_argument("--devices", type=int, default=1)
    p.add_argument("--unbounded", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_dump_allocation)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except BrokenPipeError:
        # reader went away (e.g. piped into head); stay quiet
        os.dup2(os.open(os.devnull, os.O_WRONLY), sys.stdout.fileno())
        return 0
    except (ConfigError, CompileError, ScenarioError, AllocationError, ValueError, OSError) as e:
        print(f"ianus: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
