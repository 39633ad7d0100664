"""Command-line front end: INI-configured experiments producing CSV reports
plus rendered figures alongside them.

Subcommands:

* ``simulate`` / ``sweep``: run named dataflows over a workload grid.
* ``autotune``: report the selected slice/group per workload point.
* ``wafer``: multi-die serving estimates over batch and dataflow sweeps.
* ``validate``: functional small-shape suite, all dataflows against the
  reference attention oracle.

Exit codes: 0 success, 1 configuration error, 2 simulation failure (every
row failed, or a functional case exceeded tolerance).  Per-row failures are
logged to stderr and the run continues.  This module owns all file I/O.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import itertools
import logging
import math
import sys
from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .arch import ArchConfig, from_mapping
from .dataflows import (
    DATAFLOW_NAMES,
    FLAT_VARIANTS,
    FlatParams,
    assemble_outputs,
    build_schedule,
    gen_flashattention,
    gen_flatattention,
    io_flash,
    io_flat,
    make_workload_tensors,
)
from .numerics import AttentionWorkload, Variant, reference_attention
from .sim import SimError, simulate
from .tiling import select_tiling, select_tiling_for_group
from .wafer import (
    ATTENTION_DATAFLOWS,
    ModelSpec,
    ParallelismPlan,
    WaferConfig,
    serve,
)

SCHEMA_VERSION = 1
FUNCTIONAL_TOLERANCE = 1e-6
log = logging.getLogger("tilesim")


class ConfigError(ValueError):
    pass


@dataclass(slots=True)
class Experiment:
    command: str
    name: str
    config: dict[str, dict[str, str]]
    output: Path
    base_dir: Path = Path(".")


# --- config parsing ----------------------------------------------------------


def _read_config(path: str | Path) -> dict[str, dict[str, str]]:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    cp = configparser.ConfigParser()
    cp.optionxform = str  # keep key case (B, S_kv, G_x, ...)
    try:
        cp.read(p)
    except configparser.Error as e:
        raise ConfigError(f"cannot parse {p}: {e}") from e
    return {s: dict(cp[s]) for s in cp.sections()}


def load_experiment(path: str | Path, command: str) -> Experiment:
    cfg = _read_config(path)
    exp = cfg.get("experiment", {})
    name = exp.get("name", Path(path).stem)
    output = Path(exp.get("output", f"{name}_{command}.csv"))
    return Experiment(
        command=command,
        name=name,
        config=cfg,
        output=output,
        base_dir=Path(path).resolve().parent,
    )


def _arch_of(exp: Experiment) -> ArchConfig:
    ref = exp.config.get("experiment", {}).get("arch")
    mapping = _read_config(exp.base_dir / ref) if ref else exp.config
    try:
        return from_mapping(mapping)
    except ValueError as e:
        raise ConfigError(str(e)) from e


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.replace(" ", "").split(",") if x]
    except ValueError as e:
        raise ConfigError(f"expected integer list, got '{text}'") from e


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected boolean, got '{text}'")


def _build_section(cls, section: dict[str, str], where: str, **fixed):
    """Coerce a flat string section onto a dataclass by field annotation."""
    types = {"int": int, "float": float, "str": str, "bool": _bool}
    fields = {f.name: f.type for f in dataclasses.fields(cls)}
    kwargs = dict(fixed)
    for key, val in section.items():
        if key not in fields or key in fixed:
            raise ConfigError(f"unknown key '{key}' in [{where}]")
        typ = types.get(str(fields[key]).split("|")[0].strip())
        if typ is None:
            raise ConfigError(f"key '{key}' in [{where}] is not configurable")
        try:
            kwargs[key] = typ(val)
        except ValueError as e:
            raise ConfigError(f"bad value for '{key}' in [{where}]: {e}") from e
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"[{where}]: {e}") from e


def _workload_grid(
    exp: Experiment, arch: ArchConfig
) -> list[tuple[dict, AttentionWorkload]]:
    sec = dict(exp.config.get("workload", {}))
    try:
        variant = Variant(sec.pop("variant", "MHA_prefill"))
    except ValueError as e:
        raise ConfigError(str(e)) from e
    lists = {
        "S": _ints(sec.pop("S", "4096")),
        "D": _ints(sec.pop("D", "128")),
        "B": _ints(sec.pop("B", "1")),
        "H": _ints(sec.pop("H", "32")),
    }
    scalars = {
        "G": 1,
        "d_c": 0,
        "d_rope": 0,
        "d_v": 0,
        "q_rank": 0,
        "spec_len": 1,
        "dtype_bytes": arch.dtype_bytes,
    }
    causal = _bool(sec.pop("causal", "false"))
    for key in list(sec):
        if key not in scalars:
            raise ConfigError(f"unknown key '{key}' in [workload]")
        scalars[key] = int(sec.pop(key))
    grid: list[tuple[dict, AttentionWorkload]] = []
    for S, D, B, H in itertools.product(*lists.values()):
        if variant is Variant.MHA_PREFILL:
            s_q = S
        elif variant is Variant.MHA_DECODE:
            s_q = 1
        else:
            s_q = scalars["spec_len"]
        point = {"variant": variant.value, "B": B, "H": H, "S": S, "D": D}
        try:
            wl = AttentionWorkload(
                variant=variant,
                B=B,
                H=H,
                S_q=s_q,
                S_kv=S,
                D=D,
                causal=causal,
                **scalars,
            )
        except ValueError as e:
            raise ConfigError(f"[workload]: {e}") from e
        grid.append((point, wl))
    return grid


def _run_options(exp: Experiment) -> dict:
    sec = dict(exp.config.get("run", {}))
    dataflows = [
        d for d in sec.pop("dataflows", ",".join(DATAFLOW_NAMES)).replace(" ", "").split(",") if d
    ]
    for d in dataflows:
        if d not in DATAFLOW_NAMES:
            raise ConfigError(f"unknown dataflow '{d}' in [run]")
    M = int(sec.pop("M", "128"))
    group = None
    if "group" in sec:
        try:
            gx, gy = (int(v) for v in sec.pop("group").lower().split("x"))
            group = (gx, gy)
        except ValueError as e:
            raise ConfigError(f"bad group in [run]: {e}") from e
    if sec:
        raise ConfigError(f"unknown key '{sorted(sec)[0]}' in [run]")
    return {"dataflows": dataflows, "M": M, "group": group}


# --- functional validation ----------------------------------------------------


def _functional_cases() -> list[tuple[str, AttentionWorkload]]:
    mk = AttentionWorkload
    return [
        ("mha_prefill_s64", mk(Variant.MHA_PREFILL, B=1, H=2, S_q=64, S_kv=64, D=32)),
        (
            "mha_prefill_causal_s128",
            mk(Variant.MHA_PREFILL, B=1, H=2, S_q=128, S_kv=128, D=32, causal=True),
        ),
        ("mha_decode_s128", mk(Variant.MHA_DECODE, B=2, H=2, S_q=1, S_kv=128, D=32)),
        (
            "mha_spec_decode_s128",
            mk(
                Variant.MHA_SPEC_DECODE,
                B=1,
                H=2,
                S_q=4,
                S_kv=128,
                D=32,
                spec_len=4,
                causal=True,
            ),
        ),
        (
            "gqa_decode_s128",
            mk(Variant.GQA_DECODE, B=1, H=8, S_q=1, S_kv=128, D=32, G=4),
        ),
        (
            "mla_decode_s128",
            mk(
                Variant.MLA_DECODE_ABSORBED,
                B=2,
                H=4,
                S_q=2,
                S_kv=128,
                D=32,
                d_c=32,
                spec_len=2,
                causal=True,
                d_rope=16,
                d_v=32,
                q_rank=32,
            ),
        ),
    ]


def small_flat_params(
    workload: AttentionWorkload,
    dataflow: str,
    group: tuple[int, int] = (4, 4),
    slice_cap: int = 16,
) -> FlatParams:
    """Group/slice geometry scaled down to a small validation workload."""
    strategy, async_ = FLAT_VARIANTS[dataflow]
    rows = workload.s_q_eff
    g_x = min(group[0], math.ceil(workload.S_kv / slice_cap))
    g_y = min(group[1], math.ceil(rows / slice_cap))
    slice_r = min(slice_cap, math.ceil(rows / g_y))
    slice_c = min(slice_cap, math.ceil(workload.S_kv / g_x))
    return FlatParams.make(g_x, g_y, slice_r, slice_c, strategy, async_)


def functional_max_error(
    workload: AttentionWorkload,
    arch: ArchConfig,
    dataflow: str,
    *,
    M: int = 16,
    seed: int = 7,
) -> float:
    """Simulate one dataflow functionally, compare to the reference oracle."""
    tensors = make_workload_tensors(workload, materialize=True, seed=seed)
    if dataflow in FLAT_VARIANTS:
        params = small_flat_params(workload, dataflow)
        sched = gen_flatattention(workload, arch, params, tensors=tensors)
    else:
        sched = gen_flashattention(workload, arch, dataflow, M, tensors=tensors)
    report = simulate(sched, arch, mode="functional")
    out = assemble_outputs(workload, tensors, report.outputs)
    ref = reference_attention(workload, tensors.reference_inputs)
    denom = max(float(np.abs(ref).max()), 1e-30)
    return float(np.abs(out - ref).max() / denom)


def validate_functional(arch: ArchConfig | None = None) -> list[dict]:
    """All variants x all dataflows on small shapes; rows with max rel error."""
    arch = arch or ArchConfig()
    rows: list[dict] = []
    for case, wl in _functional_cases():
        for df in DATAFLOW_NAMES:
            err = functional_max_error(wl, arch, df)
            rows.append(
                {
                    "schema_version": SCHEMA_VERSION,
                    "row": len(rows),
                    "case": case,
                    "dataflow": df,
                    "max_rel_error": err,
                    "ok": err <= FUNCTIONAL_TOLERANCE,
                }
            )
    return rows


# --- commands -----------------------------------------------------------------


def _flat_io_bytes(
    workload: AttentionWorkload, dataflow: str, M: int, params: FlatParams | None
) -> int:
    """Closed-form traffic prediction where one applies (prefill, no mask)."""
    wl = workload
    if wl.variant is not Variant.MHA_PREFILL or wl.causal:
        return 0
    if dataflow in ("FA2", "FA3"):
        return io_flash(wl.B, wl.H, wl.D, wl.S_q, M, wl.dtype_bytes).bytes_total
    if params is not None:
        return io_flat(
            wl.B, wl.H, wl.D, wl.S_q, params.slice_r, params.G_y, wl.dtype_bytes
        ).bytes_total
    return 0


def _cmd_sweep(exp: Experiment) -> tuple[list[dict], int]:
    arch = _arch_of(exp)
    grid = _workload_grid(exp, arch)
    opts = _run_options(exp)
    rows: list[dict] = []
    failures = 0
    for gi, (point, wl) in enumerate(grid):
        for df in opts["dataflows"]:
            try:
                params = None
                if df in FLAT_VARIANTS:
                    strategy, async_ = FLAT_VARIANTS[df]
                    if opts["group"]:
                        ch = select_tiling_for_group(
                            wl, arch, opts["group"][0], opts["group"][1], async_
                        )
                    else:
                        ch = select_tiling(wl, arch, async_)
                    params = FlatParams.make(
                        ch.G_x, ch.G_y, ch.slice_r, ch.slice_c, strategy, async_
                    )
                sched = build_schedule(wl, arch, df, M=opts["M"], params=params)
                rep = simulate(sched, arch)
            except (ValueError, SimError) as e:
                failures += 1
                log.error("point %d dataflow %s failed: %s", gi, df, e)
                continue
            row = {
                "schema_version": SCHEMA_VERSION,
                "row": len(rows),
                "experiment": exp.name,
                **point,
                "dataflow": df,
                "M": opts["M"] if params is None else 0,
                "slice_r": params.slice_r if params else 0,
                "slice_c": params.slice_c if params else 0,
                "G_x": params.G_x if params else 0,
                "G_y": params.G_y if params else 0,
                "time_ms": 1e3 * rep.total_cycles / arch.frequency,
                **rep.to_row(),
                "io_model_bytes": _flat_io_bytes(wl, df, opts["M"], params),
            }
            rows.append(row)
    code = 2 if (failures and not rows) else 0
    return rows, code


def _cmd_autotune(exp: Experiment) -> tuple[list[dict], int]:
    arch = _arch_of(exp)
    grid = _workload_grid(exp, arch)
    rows: list[dict] = []
    failures = 0
    for point, wl in grid:
        for mode in ("sync", "async"):
            try:
                ch = select_tiling(wl, arch, async_=(mode == "async"))
            except ValueError as e:
                failures += 1
                log.error("autotune %s (%s) failed: %s", point, mode, e)
                continue
            rows.append(
                {
                    "schema_version": SCHEMA_VERSION,
                    "row": len(rows),
                    "experiment": exp.name,
                    **point,
                    "mode": mode,
                    "slice_r": ch.slice_r,
                    "slice_c": ch.slice_c,
                    "G_x": ch.G_x,
                    "G_y": ch.G_y,
                    "utilization": ch.utilization,
                    "footprint_bytes": ch.footprint_bytes,
                }
            )
    return rows, (2 if (failures and not rows) else 0)


def _cmd_wafer(exp: Experiment) -> tuple[list[dict], int]:
    arch = _arch_of(exp)
    cfg = exp.config
    wafer = _build_section(WaferConfig, cfg.get("wafer", {}), "wafer", chip=arch)
    plan = _build_section(ParallelismPlan, cfg.get("plan", {}), "plan")
    model = _build_section(ModelSpec, cfg.get("model", {}), "model")
    sweep = cfg.get("sweep", {})
    batches = _ints(sweep.get("batch", str(plan.batch_per_chip)))
    dataflows = [
        d
        for d in sweep.get("dataflows", ",".join(ATTENTION_DATAFLOWS))
        .replace(" ", "")
        .split(",")
        if d
    ]
    for d in dataflows:
        if d not in ATTENTION_DATAFLOWS:
            raise ConfigError(f"unknown attention dataflow '{d}' in [sweep]")
    rows: list[dict] = []
    failures = 0
    for batch in batches:
        for df in dataflows:
            p = dataclasses.replace(plan, batch_per_chip=batch)
            try:
                rep = serve(p, wafer, df, model)
            except (ValueError, SimError) as e:
                failures += 1
                log.error("wafer batch=%d dataflow=%s failed: %s", batch, df, e)
                continue
            row = {
                "schema_version": SCHEMA_VERSION,
                "row": len(rows),
                "experiment": exp.name,
                "batch_per_chip": batch,
                "ep": p.ep,
                "pp": p.pp,
                "spec_len": p.spec_len,
                "dataflow": df,
                **rep.to_row(),
            }
            for k in rep.kernels:
                row[f"kernel_{k.name}_s"] = k.seconds
            rows.append(row)
    return rows, (2 if (failures and not rows) else 0)


def _cmd_validate(exp: Experiment) -> tuple[list[dict], int]:
    arch = _arch_of(exp)
    rows = validate_functional(arch)
    bad = [r for r in rows if not r["ok"]]
    for r in bad:
        log.error(
            "functional case %s / %s error %.3e exceeds %.0e",
            r["case"],
            r["dataflow"],
            r["max_rel_error"],
            FUNCTIONAL_TOLERANCE,
        )
    return rows, (2 if bad else 0)


# --- output -------------------------------------------------------------------


def _write_csv(path: Path, rows: list[dict]) -> None:
    names: list[str] = []
    for r in rows:
        for key in r:
            if key not in names:
                names.append(key)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=names, restval="")
        writer.writeheader()
        writer.writerows(rows)


def _grouped_bars(ax, rows, group_key, series_key, value_key, logy=True):
    groups = list(dict.fromkeys(str(r[group_key]) for r in rows))
    series = list(dict.fromkeys(str(r[series_key]) for r in rows))
    width = 0.8 / max(1, len(series))
    x = np.arange(len(groups))
    for si, s in enumerate(series):
        vals = []
        for g in groups:
            match = [
                r[value_key]
                for r in rows
                if str(r[group_key]) == g and str(r[series_key]) == s
            ]
            vals.append(match[0] if match else np.nan)
        ax.bar(x + si * width, vals, width, label=s)
    ax.set_xticks(x + 0.4 - width / 2)
    ax.set_xticklabels(groups, rotation=30, ha="right", fontsize=8)
    if logy:
        ax.set_yscale("log")
    ax.legend(fontsize=7)


def _point_label(r: dict) -> str:
    return f"S{r['S']} D{r['D']} B{r['B']}"


def _render(exp: Experiment, rows: list[dict], png: Path) -> None:
    fig, axes = plt.subplots(1, 2, figsize=(13, 4.8))
    cmd = exp.command
    if cmd in ("simulate", "sweep"):
        for r in rows:
            r["_pt"] = _point_label(r)
        _grouped_bars(axes[0], rows, "_pt", "dataflow", "total_cycles")
        axes[0].set_ylabel("total cycles")
        for r in rows:
            r["_bytes"] = r["hbm_bytes_read"] + r["hbm_bytes_written"]
        _grouped_bars(axes[1], rows, "_pt", "dataflow", "_bytes")
        axes[1].set_ylabel("HBM bytes")
        for r in rows:
            del r["_pt"], r["_bytes"]
    elif cmd == "autotune":
        for r in rows:
            r["_pt"] = _point_label(r)
        _grouped_bars(axes[0], rows, "_pt", "mode", "utilization", logy=False)
        axes[0].set_ylabel("matrix utilization")
        _grouped_bars(axes[1], rows, "_pt", "mode", "footprint_bytes", logy=False)
        axes[1].set_ylabel("L1 footprint (bytes)")
        for r in rows:
            del r["_pt"]
    elif cmd == "wafer":
        dataflows = list(dict.fromkeys(r["dataflow"] for r in rows))
        for df in dataflows:
            sel = [r for r in rows if r["dataflow"] == df]
            axes[0].plot(
                [r["batch_per_chip"] for r in sel],
                [r["per_chip_throughput_tok_s"] for r in sel],
                marker="o",
                label=df,
            )
        axes[0].set_xlabel("batch per chip")
        axes[0].set_ylabel("tokens/s per chip")
        axes[0].legend(fontsize=8)
        for r in rows:
            r["_pt"] = f"b{r['batch_per_chip']}"
        _grouped_bars(axes[1], rows, "_pt", "dataflow", "attention_fraction", logy=False)
        axes[1].set_ylabel("attention fraction of layer")
        for r in rows:
            del r["_pt"]
    elif cmd == "validate":
        labels = [f"{r['case']}:{r['dataflow']}" for r in rows]
        errs = [max(r["max_rel_error"], 1e-18) for r in rows]
        axes[0].bar(range(len(rows)), errs)
        axes[0].set_yscale("log")
        axes[0].axhline(FUNCTIONAL_TOLERANCE, color="r", linestyle="--")
        axes[0].set_xticks(range(len(rows)))
        axes[0].set_xticklabels(labels, rotation=90, fontsize=5)
        axes[0].set_ylabel("max relative error")
        axes[1].axis("off")
    fig.suptitle(f"{exp.name} ({cmd})")
    fig.tight_layout()
    fig.savefig(png, dpi=120)
    plt.close(fig)


_COMMANDS = {
    "simulate": _cmd_sweep,
    "sweep": _cmd_sweep,
    "autotune": _cmd_autotune,
    "wafer": _cmd_wafer,
    "validate": _cmd_validate,
}


def run(exp: Experiment) -> int:
    """Execute an experiment: write its CSV and figure, return an exit code."""
    rows, code = _COMMANDS[exp.command](exp)
    if not rows:
        log.error("no rows produced")
        return code or 2
    _write_csv(exp.output, rows)
    _render(exp, rows, exp.output.with_suffix(".png"))
    log.info("wrote %s and %s (%d rows)", exp.output, exp.output.with_suffix(".png"), len(rows))
    return code


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors are config errors (exit 1)
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tilesim", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in (
        ("simulate", "run dataflows over one workload configuration"),
        ("sweep", "run dataflows over a workload grid"),
        ("autotune", "report selected tilings over a workload grid"),
        ("wafer", "multi-die serving estimate"),
        ("validate", "functional small-shape validation suite"),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("config", help="INI experiment configuration")
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(
        stream=sys.stderr, level=logging.INFO, format="%(levelname)s %(message)s"
    )
    try:
        args = _build_parser().parse_args(argv)
        exp = load_experiment(args.config, args.command)
        return run(exp)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except (SimError, RuntimeError) as e:
        print(f"simulation error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
