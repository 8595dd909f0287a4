"""Spectrum files, run configuration, result files and the ``bayespec`` command line.

Exit codes: 0 success, 2 usage error, 3 configuration error, 4 data error,
5 numerical failure, 6 file-system error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import os
import re
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from bayespec import __version__
from bayespec.evidence import ScanResult, evidence_scan, intervals_overlap, posterior_histograms, relabeled_samples
from bayespec.likelihood import Spectrum
from bayespec.model import Basis, ModelSpec, background_curve, eval_model, peak_components, uniform_grid
from bayespec.priors import PRESETS, ConstantPrior, PriorHyper, ShirleyPrior, preset
from bayespec.sampler import SamplerConfig

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_DATA = 4
EXIT_NUMERIC = 5
EXIT_IO = 6

THREADS_ENV = "BAYESPEC_THREADS"

PRESET_BASIS = {"Synthetic4": Basis.GAUSSIAN, "MoS2_5": Basis.PSEUDO_VOIGT}
PRESET_LADDER = {"Synthetic4": (32, 1.5), "MoS2_5": (64, 1.25)}


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


# ---------------------------------------------------------------- spectra

_SPLIT = re.compile(r"[,\s]+")


def _parse_count(token: str, lineno: int) -> int:
    try:
        value = int(token)
    except ValueError:
        try:
            v = float(token)
        except ValueError:
            raise DataError(f"unparseable count {token!r} at line {lineno}") from None
        if not math.isfinite(v) or v != math.floor(v):
            raise DataError(f"non-integer count at line {lineno}") from None
        value = int(v)
    if value < 0:
        raise DataError(f"negative count at line {lineno}")
    return value


def parse_spectrum(text: str) -> Spectrum:
    """Parse two-column (energy, count) text. Rows are sorted by energy on load."""
    xs, ys = [], []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = [p for p in _SPLIT.split(line) if p]
        if len(parts) != 2:
            raise DataError(f"expected 2 columns at line {lineno}, got {len(parts)}")
        try:
            x = float(parts[0])
        except ValueError:
            raise DataError(f"unparseable energy {parts[0]!r} at line {lineno}") from None
        if not math.isfinite(x):
            raise DataError(f"non-finite energy at line {lineno}")
        xs.append(x)
        ys.append(_parse_count(parts[1], lineno))
    if len(xs) < 2:
        raise DataError(f"need at least 2 data rows, found {len(xs)}")
    x = np.array(xs)
    y = np.array(ys, dtype=np.int64)
    order = np.argsort(x, kind="stable")
    x, y = x[order], y[order]
    dup = np.flatnonzero(np.diff(x) == 0)
    if dup.size:
        raise DataError(f"duplicate energy {x[dup[0]]!r}")
    return Spectrum(x, y)


def load_spectrum(path) -> Spectrum:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_spectrum(fh.read())


def write_spectrum(path, spectrum: Spectrum) -> None:
    """Write a spectrum so that :func:`load_spectrum` reads it back exactly."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("# energy count\n")
        for x, y in zip(spectrum.x, spectrum.y):
            fh.write(f"{float(x)!r} {int(y)}\n")


def file_sha256(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


# ---------------------------------------------------------------- config

_SAMPLER_KEYS = ("replicas", "gamma", "iterations", "burn_in", "exchange_period", "seed", "thin")
_HYPER_KEYS = ("eta_a", "lambda_a", "nu_0", "xi_0", "eta_sigma", "lambda_sigma")
_BG_KEYS = {"constant": ("nu_B", "xi_B"), "shirley": ("eta_c", "lambda_c", "nu_start", "xi_start")}
_TOP_KEYS = ("preset", "T", "basis", "hyper", "K_range", "sampler", "grid", "vma", "bins", "out_dir")
_VMA_KEYS = ("T", "replications", "workers")
_GRID_KEYS = ("start", "stop", "step")


@dataclass(frozen=True)
class RunConfig:
    """Fully resolved run configuration."""

    preset: str = "Synthetic4"
    T: float = 1.0
    basis: Basis = Basis.GAUSSIAN
    hyper: PriorHyper = field(default_factory=lambda: preset("Synthetic4", 1.0))
    K_range: tuple = (1, 5)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    grid: tuple = (158.0, 166.0, 0.04)
    vma_T: tuple = (1000.0, 100.0, 10.0, 1.0)
    vma_replications: int = 10
    vma_workers: int = 1
    bins: int = 50
    out_dir: Optional[str] = None

    @property
    def spec(self) -> ModelSpec:
        return ModelSpec(self.basis, self.hyper.background_kind, self.K_range[0])

    def to_dict(self) -> dict:
        """Effective configuration; :func:`config_from_dict` maps it back to an equal config."""
        s = self.sampler
        return {
            "preset": self.preset,
            "T": self.T,
            "basis": self.basis.value,
            "hyper": self.hyper.to_dict(),
            "K_range": list(self.K_range),
            "sampler": {k: getattr(s, k) for k in _SAMPLER_KEYS},
            "grid": dict(zip(_GRID_KEYS, self.grid)),
            "vma": {"T": list(self.vma_T), "replications": self.vma_replications, "workers": self.vma_workers},
            "bins": self.bins,
            "out_dir": self.out_dir,
        }


def _check_keys(d, allowed, where: str) -> dict:
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be a JSON object")
    unknown = sorted(set(d) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    return d


def _number(v, name: str, integer: bool = False):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{name} must be a number, got {v!r}")
    if integer:
        if int(v) != v:
            raise ConfigError(f"{name} must be an integer, got {v!r}")
        return int(v)
    if not math.isfinite(v):
        raise ConfigError(f"{name} must be finite")
    return float(v)


def _resolve_hyper(name: str, T: float, overrides: dict) -> PriorHyper:
    base = preset(name, T)
    _check_keys(overrides, _HYPER_KEYS + ("background",), "hyper")
    values = {k: _number(overrides[k], f"hyper.{k}") if k in overrides else getattr(base, k) for k in _HYPER_KEYS}
    bg_over = dict(overrides.get("background", {}))
    kind = bg_over.pop("kind", base.background_kind.value)
    if kind not in _BG_KEYS:
        raise ConfigError(f"hyper.background.kind must be 'constant' or 'shirley', got {kind!r}")
    _check_keys(bg_over, _BG_KEYS[kind], "hyper.background")
    same = kind == base.background_kind.value
    bg = {}
    for k in _BG_KEYS[kind]:
        if k in bg_over:
            bg[k] = _number(bg_over[k], f"hyper.background.{k}")
        elif same:
            bg[k] = getattr(base.background, k)
        else:
            raise ConfigError(f"hyper.background.{k} is required when switching the background to {kind}")
    background = ConstantPrior(**bg) if kind == "constant" else ShirleyPrior(**bg)
    try:
        return PriorHyper(background=background, **values)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def config_from_dict(d: dict) -> RunConfig:
    """Validate a configuration mapping (strict keys) and fill in defaults."""
    d = _check_keys(d, _TOP_KEYS, "config")
    name = d.get("preset", "Synthetic4")
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; expected one of {PRESETS}")
    T = _number(d.get("T", 1.0), "T")
    if not T > 0:
        raise ConfigError(f"T must be positive, got {T}")
    try:
        basis = Basis(d["basis"]) if "basis" in d else PRESET_BASIS[name]
    except ValueError:
        raise ConfigError(f"unknown basis {d['basis']!r}; expected one of {[b.value for b in Basis]}") from None
    hyper = _resolve_hyper(name, T, d.get("hyper", {}))

    kr = d.get("K_range", [1, 5])
    if not isinstance(kr, (list, tuple)) or len(kr) != 2:
        raise ConfigError("K_range must be a pair [K_min, K_max]")
    kmin, kmax = (_number(k, "K_range", integer=True) for k in kr)
    if kmin < 1:
        raise ConfigError("K_range must start at 1 or above")
    if kmax < kmin:
        raise ConfigError("empty K range")

    s = _check_keys(d.get("sampler", {}), _SAMPLER_KEYS, "sampler")
    replicas, gamma = PRESET_LADDER[name]
    sampler_kw = {"replicas": replicas, "gamma": gamma}
    for k in _SAMPLER_KEYS:
        if k in s:
            sampler_kw[k] = _number(s[k], f"sampler.{k}", integer=k != "gamma")
    try:
        sampler = SamplerConfig(**sampler_kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None

    g = _check_keys(d.get("grid", {}), _GRID_KEYS, "grid")
    grid = tuple(_number(g.get(k, v), f"grid.{k}") for k, v in zip(_GRID_KEYS, (158.0, 166.0, 0.04)))
    if not (grid[2] > 0 and grid[1] > grid[0]):
        raise ConfigError("grid needs start < stop and a positive step")

    v = _check_keys(d.get("vma", {}), _VMA_KEYS, "vma")
    vma_T = tuple(_number(t, "vma.T") for t in v.get("T", (1000.0, 100.0, 10.0, 1.0)))
    if not vma_T or any(t <= 0 for t in vma_T):
        raise ConfigError("vma.T must be a nonempty list of positive times")
    reps = _number(v.get("replications", 10), "vma.replications", integer=True)
    workers = _number(v.get("workers", 1), "vma.workers", integer=True)
    if reps < 1 or workers < 1:
        raise ConfigError("vma.replications and vma.workers must be >= 1")

    bins = _number(d.get("bins", 50), "bins", integer=True)
    if bins < 1:
        raise ConfigError("bins must be >= 1")
    out_dir = d.get("out_dir")
    if out_dir is not None and not isinstance(out_dir, str):
        raise ConfigError("out_dir must be a string")
    return RunConfig(name, T, basis, hyper, (kmin, kmax), sampler, grid, vma_T, reps, workers, bins, out_dir)


def load_config(path) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            d = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return config_from_dict(d)


# ---------------------------------------------------------------- outputs

@dataclass(eq=False)
class FitResults:
    spectrum: Spectrum
    config: RunConfig
    scan: ScanResult
    spectrum_info: dict = field(default_factory=dict)
    command: str = "fit"


def _fmt(v) -> str:
    return repr(float(v))


def _write_csv(path: Path, header: Sequence[str], rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _json_dump(path: Path, obj) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=True)
        fh.write("\n")


def build_manifest(results: FitResults) -> dict:
    scan = results.scan
    per_K = {}
    for K, chains in scan.chains.items():
        ev = scan.evidence[K]
        theta = scan.map_theta(K)
        names = chains.coordinate_names
        per_K[str(K)] = {
            "F": ev.F,
            "mc_se": ev.mc_se,
            "p_K": scan.posterior.probabilities[K],
            "seed": scan.seeds[K],
            "map": dict(zip(names, theta.to_vector().tolist())),
            "exchange_rates": chains.exchange_rates.tolist(),
            "accept_rates_beta1": dict(zip(names, chains.accept_rates[-1].tolist())),
        }
    return {
        "software": {"name": "bayespec", "version": __version__},
        "command": results.command,
        "config": results.config.to_dict(),
        "seed": results.config.sampler.seed,
        "spectrum": results.spectrum_info,
        "results": per_K,
        "selected_K": scan.selected,
    }


def write_outputs(results: FitResults, out_dir, full: bool = True) -> list[Path]:
    """Write the result files. With ``full=False`` only free_energy.csv and manifest.json."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    scan = results.scan
    written = []

    path = out / "free_energy.csv"
    ks = sorted(scan.evidence)
    _write_csv(path, ["K", "F", "mc_se", "p_K"],
               [[K, _fmt(scan.evidence[K].F), _fmt(scan.evidence[K].mc_se), _fmt(scan.posterior.probabilities[K])]
                for K in ks])
    written.append(path)

    if full:
        K = scan.selected
        chains = scan.chains[K]
        spec = chains.spec
        theta = scan.map_theta(K)
        x = results.spectrum.x
        comps = peak_components(x, theta, spec)
        bg = background_curve(x, theta, spec)
        f = eval_model(x, theta, spec)
        path = out / "fit_curve.csv"
        _write_csv(path, ["x", "y", "f"] + [f"peak_{k + 1}" for k in range(K)] + ["background"],
                   [[_fmt(x[i]), int(results.spectrum.y[i]), _fmt(f[i])] + [_fmt(c) for c in comps[:, i]] + [_fmt(bg[i])]
                    for i in range(x.size)])
        written.append(path)

        samples = relabeled_samples(chains)
        path = out / "samples.csv"
        _write_csv(path, ["sample", "E", "log_prior"] + chains.coordinate_names,
                   [[r, _fmt(chains.energies[-1, r]), _fmt(chains.log_prior[-1, r])] + [_fmt(v) for v in samples[r]]
                    for r in range(samples.shape[0])])
        written.append(path)

        hist = posterior_histograms(chains, "mu", bins=results.config.bins)
        path = out / "histograms.csv"
        rows = []
        for k in range(K):
            for b in range(hist.counts.shape[1]):
                rows.append([k + 1, _fmt(hist.edges[b]), _fmt(hist.edges[b + 1]), int(hist.counts[k, b])])
        _write_csv(path, ["peak", "mu_left", "mu_right", "count"], rows)
        written.append(path)

    manifest = build_manifest(results)
    if full:
        manifest["credible_intervals_mu"] = hist.intervals.tolist()
        manifest["intervals_overlap"] = intervals_overlap(hist.intervals)
    path = out / "manifest.json"
    _json_dump(path, manifest)
    written.append(path)
    return written


# ---------------------------------------------------------------- commands

def _threads(args) -> int:
    if args.threads is not None:
        n = args.threads
    else:
        env = os.environ.get(THREADS_ENV)
        try:
            n = int(env) if env else 1
        except ValueError:
            raise ConfigError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
    if n < 1:
        raise ConfigError("thread count must be >= 1")
    return n


def _apply_threads(n: int) -> bool:
    """Set the numba thread count and report whether the parallel kernel should run."""
    if n == 1:
        return False
    import numba

    available = numba.config.NUMBA_NUM_THREADS
    if n > available:
        log.warning("requested %d threads but only %d are available", n, available)
        n = available
    numba.set_num_threads(n)
    return n > 1


def _config_with_flags(cfg: RunConfig, args) -> RunConfig:
    s = cfg.sampler
    over = {}
    for flag, key in (("seed", "seed"), ("replicas", "replicas"), ("gamma", "gamma"),
                      ("iterations", "iterations"), ("burn_in", "burn_in")):
        v = getattr(args, flag, None)
        if v is not None:
            over[key] = v
    try:
        sampler = replace(s, **over) if over else s
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    kmin = args.kmin if getattr(args, "kmin", None) is not None else cfg.K_range[0]
    kmax = args.kmax if getattr(args, "kmax", None) is not None else cfg.K_range[1]
    if kmin < 1:
        raise ConfigError("K_range must start at 1 or above")
    if kmax < kmin:
        raise ConfigError("empty K range")
    return replace(cfg, sampler=sampler, K_range=(kmin, kmax))


def _load_run_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else config_from_dict({})
    return _config_with_flags(cfg, args)


def run_fit(spectrum_path, cfg: RunConfig, out_dir, command: str = "fit", parallel: bool = False,
            timing: bool = True) -> list[Path]:
    """Fit every K in the configured range and write the result files."""
    spectrum = load_spectrum(spectrum_path)
    info = {"path": str(spectrum_path), "sha256": file_sha256(spectrum_path), "n": spectrum.n}
    t0 = time.perf_counter()
    scan = evidence_scan(spectrum, cfg.spec, cfg.hyper, replace(cfg.sampler, parallel=parallel), cfg.K_range)
    elapsed = time.perf_counter() - t0
    results = FitResults(spectrum, cfg, scan, info, command)
    written = write_outputs(results, out_dir, full=command == "fit")
    if timing:
        # kept out of manifest.json so the manifest stays byte-reproducible
        _json_dump(Path(out_dir) / "timing.json", {"wall_clock_s": elapsed, "parallel": parallel})
    return written


def replay(manifest_path, out_dir, parallel: bool = False) -> list[Path]:
    """Re-run the job recorded in a manifest.json."""
    with open(manifest_path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    cfg = config_from_dict(manifest["config"])
    info = manifest["spectrum"]
    digest = file_sha256(info["path"])
    if digest != info["sha256"]:
        raise DataError(f"spectrum {info['path']} changed since the manifest was written")
    return run_fit(info["path"], cfg, out_dir, command=manifest["command"], parallel=parallel)


def _cmd_fit(args) -> int:
    cfg = _load_run_config(args)
    parallel = not args.serial and _apply_threads(_threads(args))
    out = args.out or cfg.out_dir
    if out is None:
        raise ConfigError("no output directory: pass --out or set out_dir in the config")
    for p in run_fit(args.spectrum, cfg, out, command=args.command, parallel=parallel):
        print(p)
    return EXIT_OK


def _cmd_replay(args) -> int:
    parallel = not args.serial and _apply_threads(_threads(args))
    for p in replay(args.manifest, args.out, parallel=parallel):
        print(p)
    return EXIT_OK


def _cmd_simulate(args) -> int:
    from bayespec.vma import doublet_truth, simulate_spectrum, synthetic_truth

    grid = uniform_grid(args.grid_start, args.grid_stop, args.grid_step)
    truth = synthetic_truth(args.T, grid) if args.preset == "Synthetic4" else doublet_truth(args.T, grid)
    spectrum = simulate_spectrum(truth, np.random.default_rng(args.seed))
    write_spectrum(args.out, spectrum)
    print(args.out)
    return EXIT_OK


def _cmd_vma(args) -> int:
    from bayespec.vma import run_vma_experiment, write_vma_outputs

    cfg = _load_run_config(args)
    if cfg.preset != "Synthetic4":
        raise ConfigError("vma runs the three-peak benchmark and needs preset Synthetic4")
    parallel = not args.serial and _apply_threads(_threads(args))
    out = args.out or cfg.out_dir
    if out is None:
        raise ConfigError("no output directory: pass --out or set out_dir in the config")
    grid = uniform_grid(*cfg.grid)
    t0 = time.perf_counter()
    table, runs = run_vma_experiment(cfg.vma_T, cfg.vma_replications, cfg.K_range,
                                     replace(cfg.sampler, parallel=parallel), cfg.sampler.seed, grid,
                                     cfg.preset, cfg.vma_workers)
    elapsed = time.perf_counter() - t0
    extra = {"software": {"name": "bayespec", "version": __version__}, "config": cfg.to_dict()}
    for p in write_vma_outputs(table, runs, out, extra):
        print(p)
    _json_dump(Path(out) / "timing.json", {"wall_clock_s": elapsed, "parallel": parallel})
    return EXIT_OK


def _add_sampler_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--replicas", type=int)
    p.add_argument("--gamma", type=float)
    p.add_argument("--iterations", type=int)
    p.add_argument("--burn-in", dest="burn_in", type=int)
    p.add_argument("--kmin", type=int)
    p.add_argument("--kmax", type=int)
    _add_thread_flags(p)


def _add_thread_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--threads", type=int, help=f"worker threads (default ${THREADS_ENV} or 1)")
    p.add_argument("--serial", action="store_true", help="force the single-threaded schedule")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bayespec", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit every K in the range and write fit curves, samples and histograms")
    p.add_argument("spectrum")
    _add_sampler_flags(p)
    p.set_defaults(func=_cmd_fit)

    p = sub.add_parser("evidence", help="free energies and p(K|D) over the K range")
    p.add_argument("spectrum")
    _add_sampler_flags(p)
    p.set_defaults(func=_cmd_fit)

    p = sub.add_parser("simulate", help="draw a synthetic spectrum")
    p.add_argument("--preset", choices=PRESETS, default="Synthetic4")
    p.add_argument("--T", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--grid-start", type=float, default=158.0)
    p.add_argument("--grid-stop", type=float, default=166.0)
    p.add_argument("--grid-step", type=float, default=0.04)
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("vma", help="selection-frequency table over pseudo-measurement times")
    _add_sampler_flags(p)
    p.set_defaults(func=_cmd_vma)

    p = sub.add_parser("replay", help="re-run the job recorded in a manifest.json")
    p.add_argument("manifest")
    p.add_argument("--out", required=True)
    _add_thread_flags(p)
    p.set_defaults(func=_cmd_replay)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (FloatingPointError, ArithmeticError, RuntimeError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"file error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
