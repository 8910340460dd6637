"""Command-line entry point: simulate | analyze | sweep | g2 | plan.

Exit codes: 0 success, 2 configuration error, 3 data-format error,
4 numerical non-convergence.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import dataclasses
import hashlib
import json
import math
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import __version__
from .analysis.fitting import DegenerateDataError, FitError
from .analysis.g2 import G2Accumulator, sequence_index, windowed_pulse_indices
from .analysis.histogram import HistogramBuilder
from .analysis.rates import fit_efficiency_curve, fit_noise_line, snr_curve, windowed_rates
from .analysis.summary import analyze_histogram
from .chain import total_efficiency
from .config import ConfigError, RunConfig, load_config
from .netplan import NoCrossoverError, crossover_closed_form, crossover_distance, rate_sweep
from .pipeline import Arm, iter_detected, telecom_arm, visible_arm
from .rng import derive_seed
from .timetag import (CH_SYNC, CH_TELECOM_A, CH_TELECOM_B, CH_VISIBLE, CH_VISIBLE_B, HeaderMismatchError,
                      TimeTagFormatError, TimeTagWriter, open_qtag)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_FIT = 0, 2, 3, 4
TELECOM_CHANNELS = (CH_TELECOM_A, CH_TELECOM_B)
READ_CHUNK_RECORDS = 1 << 22


class UsageError(ValueError):
    pass


# -- helpers -----------------------------------------------------------------

def _clean(obj):
    """JSON-safe copy: numpy scalars/arrays to Python, non-finite floats to None."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, np.generic):
        obj = obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


class Outputs:
    """Files staged next to their targets and renamed into place only on success."""

    def __init__(self, out_dir: Path):
        self.dir = out_dir
        self.staged: dict[Path, Path] = {}

    def path(self, name: str) -> Path:
        final = self.dir / name
        fd, tmp = tempfile.mkstemp(dir=self.dir, prefix=f".{name}.", suffix=".part")
        os.close(fd)
        self.staged[final] = Path(tmp)
        return Path(tmp)

    def write_json(self, name: str, obj) -> None:
        self.path(name).write_text(json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n")

    def write_csv(self, name: str, header, rows) -> None:
        with open(self.path(name), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            w.writerows(rows)

    def commit(self) -> list[Path]:
        umask = os.umask(0)
        os.umask(umask)
        for final, tmp in self.staged.items():
            os.chmod(tmp, 0o666 & ~umask)
            os.replace(tmp, final)
        return sorted(self.staged)

    def discard(self) -> None:
        for tmp in self.staged.values():
            tmp.unlink(missing_ok=True)


@contextlib.contextmanager
def staged_outputs(out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    o = Outputs(out_dir)
    try:
        yield o
    except BaseException:
        o.discard()
        raise
    o.commit()


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 22), b""):
            h.update(block)
    return h.hexdigest()


def _detector_for(cfg: RunConfig, channel: int):
    if channel in TELECOM_CHANNELS:
        return cfg.telecom, cfg.telecom_noise
    return cfg.visible, cfg.visible_noise


def _arrival_ns(cfg: RunConfig, channel: int) -> float:
    return _detector_for(cfg, channel)[0].path_delay_ns


def run_arms(cfg: RunConfig, converted: bool, pump_W: float) -> list[Arm]:
    share = 0.5 if cfg.hbt else 1.0
    if converted:
        eta = total_efficiency(pump_W, cfg.dfg, cfg.losses)
        chans = TELECOM_CHANNELS if cfg.hbt else (CH_TELECOM_A,)
        return [telecom_arm(cfg.telecom, cfg.telecom_noise, c, eta, pump_W, share) for c in chans]
    chans = (CH_VISIBLE, CH_VISIBLE_B) if cfg.hbt else (CH_VISIBLE,)
    return [visible_arm(cfg.visible, cfg.visible_noise, c, share) for c in chans]


def run_seed(cfg: RunConfig, converted: bool) -> int:
    return derive_seed(cfg.seed, "telecom-run" if converted else "visible-run")


def histogram_builder(cfg: RunConfig, channel: int) -> HistogramBuilder:
    a = cfg.analysis
    t0 = round((_arrival_ns(cfg, channel) - a.hist_lead_ns) * 1000)
    span = cfg.schedule.spacing_ps - cfg.schedule.spacing_ps % a.bin_width_ps
    return HistogramBuilder(cfg.schedule, a.bin_width_ps, t0, t0 + span, channel)


def analyze_builder(cfg: RunConfig, hb: HistogramBuilder) -> tuple[dict, object]:
    a = cfg.analysis
    h = hb.result()
    arrival = _arrival_ns(cfg, hb.channel)
    summary = analyze_histogram(h, arrival, a.window(arrival), a.fit_start_ns, a.fit_stop_ns,
                                round(a.fit_bin_width_ns * 1000))
    summary["path_delay_ns"] = arrival
    return summary, h


def _read_chunks(path: Path, schedule_spacing_ps: int):
    header, chunks = open_qtag(path, READ_CHUNK_RECORDS)
    if header.sync_period_ps != schedule_spacing_ps:
        raise HeaderMismatchError(f"{path}: sync period {header.sync_period_ps} ps does not match the "
                                  f"configured pulse spacing {schedule_spacing_ps} ps")
    return header, chunks


# -- commands ----------------------------------------------------------------

def cmd_simulate(cfg: RunConfig, out_dir: Path) -> dict:
    """Pre- and post-conversion time-tag files plus a manifest."""
    s = cfg.schedule
    files = {}
    with staged_outputs(out_dir) as out:
        for converted, stem in ((False, "visible"), (True, "telecom")):
            arms = run_arms(cfg, converted, cfg.pump_W)
            names = {a.channel: (f"{stem}_{'ab'[i]}.qtag" if cfg.hbt else f"{stem}.qtag")
                     for i, a in enumerate(arms)}
            tmp = {c: out.path(n) for c, n in names.items()}
            handles = {c: open(p, "wb") for c, p in tmp.items()}
            try:
                writers = {c: TimeTagWriter(handles[c], s.spacing_ps) for c in tmp}
                for chunk in iter_detected(s, cfg.emitter, run_seed(cfg, converted), arms, cfg.threads):
                    for c, w in writers.items():
                        w.append(chunk[chunk["channel"] == c] if len(writers) > 1 else chunk)
                counts = {c: w.close() for c, w in writers.items()}
            finally:
                for fh in handles.values():
                    fh.close()
            for c, n in names.items():
                files[n] = {"channel": c, "records": counts[c], "sha256": _sha256(tmp[c])}
        manifest = {"command": "simulate", "version": __version__, "seed": cfg.seed,
                    "pump_mW": cfg.pump_mW, "n_excitations": s.n_pulses,
                    "total_efficiency": total_efficiency(cfg.pump_W, cfg.dfg, cfg.losses),
                    "files": files, "config": cfg.to_dict()}
        out.write_json("manifest.json", manifest)
    return manifest


def cmd_analyze(cfg: RunConfig, tagfile: Path, out_dir: Path) -> dict:
    """Histogram CSV per channel and a summary JSON (lifetime fit, windowed rates, SNR)."""
    _, chunks = _read_chunks(tagfile, cfg.schedule.spacing_ps)
    builders: dict[int, HistogramBuilder] = {}
    for chunk in chunks:
        for c in np.unique(chunk["channel"]).tolist():
            if c == CH_SYNC:
                continue
            if c not in builders:
                builders[c] = histogram_builder(cfg, c)
            builders[c].add_records(chunk)
    if not builders:
        builders[CH_VISIBLE] = histogram_builder(cfg, CH_VISIBLE)
    summary = {"command": "analyze", "file": str(tagfile), "channels": {}}
    with staged_outputs(out_dir) as out:
        for c, hb in sorted(builders.items()):
            s, h = analyze_builder(cfg, hb)
            summary["channels"][str(c)] = s
            h.write_csv(out.path(f"histogram_ch{c}.csv"))
        out.write_json("summary.json", summary)
    return summary


def sweep_point(cfg: RunConfig, index: int, pump_W: float) -> dict:
    seed = cfg.seed ^ index
    arms = run_arms(dataclasses.replace(cfg, hbt=False), True, pump_W)
    hb = histogram_builder(cfg, CH_TELECOM_A)
    for chunk in iter_detected(cfg.schedule, cfg.emitter, seed, arms, cfg.threads):
        hb.add_records(chunk)
    arrival = _arrival_ns(cfg, CH_TELECOM_A)
    r = windowed_rates(hb.result(), cfg.analysis.window(arrival))
    return {"pump_mW": pump_W * 1e3, "seed": seed, **r.to_dict()}


def sweep_fits(cfg: RunConfig, points: list[dict]):
    P = np.array([p["pump_mW"] for p in points]) * 1e-3
    sig = np.array([p["p_signal"] for p in points])
    sig_e = np.array([p["p_signal_err"] for p in points])
    noi = np.array([p["p_noise"] for p in points])
    noi_e = np.array([p["p_noise_err"] for p in points])
    eff = fit_efficiency_curve(P, sig, sig_e, cfg.dfg.L_m)
    noise = fit_noise_line(P, noi, noi_e)
    grid = np.round(np.arange(0.0, max(P.max(), 0.4) + 1e-9, 0.005), 6)
    tau = cfg.emitter.lifetime_ns
    snr6 = snr_curve(eff, noise, [0.075], cfg.dfg.L_m, 6.0, cfg.analysis.signal_width_ns, tau)[0, 1]
    table = snr_curve(eff, noise, grid, cfg.dfg.L_m)
    return {"efficiency_fit": eff.to_dict(), "noise_fit": noise.to_dict(),
            "optimal_pump_mW": (math.pi / (2 * cfg.dfg.L_m)) ** 2 / eff["K"] * 1e3,
            "snr_table": [{"pump_mW": p * 1e3, "snr": v} for p, v in table],
            "snr_110mW": float(snr_curve(eff, noise, [0.11], cfg.dfg.L_m)[0, 1]),
            "snr_6ns_window_75mW": float(snr6), "lifetime_for_window_rescaling_ns": tau}, eff, noise


def cmd_sweep(cfg: RunConfig, powers_mW, out_dir: Path) -> dict:
    """Per-power windowed rates and the efficiency, noise and SNR fits."""
    powers = list(powers_mW or cfg.powers_mW)
    if len(powers) < 4:
        raise ConfigError(f"sweep needs at least 4 pump powers, got {len(powers)}")
    if any(p < 0 for p in powers):
        raise ConfigError("pump powers must be non-negative")
    points = [sweep_point(cfg, i, p * 1e-3) for i, p in enumerate(powers)]
    fits, eff, noise = sweep_fits(cfg, points)
    with staged_outputs(out_dir) as out:
        model_snr = snr_curve(eff, noise, [p["pump_mW"] * 1e-3 for p in points], cfg.dfg.L_m)[:, 1]
        out.write_csv("sweep.csv", ["pump_mW", "p_signal", "p_signal_err", "p_noise", "p_noise_err", "snr",
                                    "snr_model"],
                      [[p["pump_mW"], p["p_signal"], p["p_signal_err"], p["p_noise"], p["p_noise_err"],
                        p["snr"], m] for p, m in zip(points, model_snr)])
        out.write_csv("snr_curve.csv", ["pump_mW", "snr"],
                      [[r["pump_mW"], r["snr"]] for r in fits["snr_table"]])
        result = {"command": "sweep", "seed": cfg.seed, "points": points, **fits}
        out.write_json("fits.json", result)
    return result


def pulse_stream(cfg: RunConfig, path: Path, window_ns: float, lead_ns: float):
    """Per chunk of one single-channel file: ``(channel, windowed pulse indices, frontier sequence)``.

    Every later tag of the file belongs to the frontier sequence or a later one.
    """
    _, chunks = _read_chunks(path, cfg.schedule.spacing_ps)
    chan = None
    empty = np.empty(0, np.int64)
    for chunk in chunks:
        present = set(np.unique(chunk["channel"]).tolist()) - {CH_SYNC}
        if chan is None and present:
            chan = min(present)
        if present - {chan}:
            raise UsageError(f"{path} holds several channels {sorted(present | {chan})}; g2 needs one per file")
        pulses = (windowed_pulse_indices(chunk, chan, cfg.schedule, _arrival_ns(cfg, chan) - lead_ns, window_ns)
                  if chan is not None else empty)
        yield chan, pulses, sequence_index(cfg.schedule, int(chunk["timestamp_ps"][-1]))
    if chan is None:
        raise UsageError(f"{path}: empty channel")
    yield chan, empty, math.inf


def cmd_g2(cfg: RunConfig, file_a: Path, file_b: Path, out_dir: Path) -> dict:
    """Normalised coincidence peaks -k..k between two detector files, streamed in lockstep."""
    if file_a.resolve() == file_b.resolve() or (file_a.stat().st_size == file_b.stat().st_size
                                                 and _sha256(file_a) == _sha256(file_b)):
        raise UsageError("the same file was given twice; same-channel autocorrelation is unsupported")
    a = cfg.analysis
    acc = G2Accumulator(cfg.schedule, a.g2_window_ns, a.g2_max_k)
    streams = [pulse_stream(cfg, f, a.g2_window_ns, a.g2_lead_ns) for f in (file_a, file_b)]
    chans = [None, None]
    front = [-1, -1]
    empty = np.empty(0, np.int64)
    while min(front) < math.inf:
        i = 0 if front[0] <= front[1] else 1
        chans[i], pulses, front[i] = next(streams[i])
        if chans[0] is not None and chans[0] == chans[1]:
            raise UsageError("both files hold the same channel; same-channel autocorrelation is unsupported")
        pa, pb = (pulses, empty) if i == 0 else (empty, pulses)
        acc.feed(pa, pb, min(front))
    if acc.singles_a.sum() == 0 or acc.singles_b.sum() == 0:
        raise UsageError("a channel has no tags inside the coincidence windows")
    r = acc.result()
    result = {"command": "g2", "files": [str(file_a), str(file_b)], "channels": chans,
              "window_ns": a.g2_window_ns, **r.to_dict()}
    with staged_outputs(out_dir) as out:
        r.write_csv(out.path("g2.csv"))
        out.write_json("g2.json", result)
    return result


def cmd_plan(cfg: RunConfig, out_dir: Path) -> dict:
    """Crossover distance and a rate-versus-separation sweep."""
    lp = cfg.planner
    report = {"command": "plan", "link": dataclasses.asdict(lp)}
    try:
        d = crossover_distance(lp)
        report.update(crossover_km=d, closed_form_km=crossover_closed_form(lp))
    except NoCrossoverError as exc:
        report.update(crossover_km=None, no_crossover=str(exc))
    rows = rate_sweep(lp, cfg.planner_max_km, cfg.planner_step_km)
    with staged_outputs(out_dir) as out:
        out.write_csv("rates.csv", ["separation_km", "rate_unconverted", "rate_converted"], rows.tolist())
        out.write_json("plan.json", report)
    return report


# -- entry point -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="qfcsim", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, type=Path, help="INI run configuration")
        p.add_argument("--seed", type=int, help="override [run] seed")
        p.add_argument("--out", type=Path, default=Path("out"), help="output directory")
        p.add_argument("--threads", type=int, help="worker threads")
        return p

    p = common(sub.add_parser("simulate", help="simulate pre- and post-conversion time tags"))
    p.add_argument("--pump-mW", type=float, dest="pump_mW")
    p = common(sub.add_parser("analyze", help="histogram, lifetime fit and windowed rates of a tag file"))
    p.add_argument("tagfile", type=Path)
    p = common(sub.add_parser("sweep", help="pump-power sweep with efficiency, noise and SNR fits"))
    p.add_argument("--powers", help="comma-separated pump powers in mW")
    p = common(sub.add_parser("g2", help="pulsed HBT coincidence histogram of two tag files"))
    p.add_argument("tagfile_a", type=Path)
    p.add_argument("tagfile_b", type=Path)
    common(sub.add_parser("plan", help="entanglement-rate crossover distance"))
    return ap


def _resolve(args) -> RunConfig:
    cfg = load_config(args.config)
    over = {}
    if args.seed is not None:
        if not 0 <= args.seed < 1 << 64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        over["seed"] = args.seed
    if args.threads is not None:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        over["threads"] = args.threads
    if getattr(args, "pump_mW", None) is not None:
        if args.pump_mW < 0:
            raise ConfigError("--pump-mW must be non-negative")
        over["pump_mW"] = args.pump_mW
    return dataclasses.replace(cfg, **over)


def _powers(text: str | None):
    if text is None:
        return None
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"--powers must be a comma-separated list of numbers, got {text!r}") from None


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _resolve(args)
        if args.command == "simulate":
            res = cmd_simulate(cfg, args.out)
            msg = ", ".join(f"{k}: {v['records']} tags" for k, v in res["files"].items())
        elif args.command == "analyze":
            res = cmd_analyze(cfg, args.tagfile, args.out)
            msg = "; ".join(f"ch{c}: {s['n_tags']} tags, tau = "
                            f"{(s['lifetime_fit'] or {}).get('params', {}).get('tau_ns', float('nan')):.2f} ns, "
                            f"arrival {s['arrival_offset_ns']:.1f} ns" for c, s in res["channels"].items())
        elif args.command == "sweep":
            res = cmd_sweep(cfg, _powers(args.powers), args.out)
            e = res["efficiency_fit"]["params"]
            msg = (f"p_max = {e['p_max']:.3e}, K = {e['K']:.4g} W^-1 m^-2, "
                   f"SNR(110 mW) = {res['snr_110mW']:.2f}")
        elif args.command == "g2":
            res = cmd_g2(cfg, args.tagfile_a, args.tagfile_b, args.out)
            msg = " ".join(f"g2({k})={v:.3f}" for k, v in zip(res["k"], res["g2"]) if v is not None)
        else:
            res = cmd_plan(cfg, args.out)
            msg = (f"crossover at {res['crossover_km']:.3f} km" if res["crossover_km"] is not None
                   else f"no crossover: {res['no_crossover']}")
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TimeTagFormatError, HeaderMismatchError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (FitError, DegenerateDataError) as exc:
        print(f"fit error: {exc}", file=sys.stderr)
        return EXIT_FIT
    print(msg)
    return EXIT_OK
