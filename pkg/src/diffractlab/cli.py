"""Command-line experiment runner: generate, check, sample, autocorrelate, diffract, classify."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import platform
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .autocorr import AutocorrelationTable, covariance_estimate, eta_unweighted, eta_weighted, weights_matrix
from .config import (ExperimentConfig, load_config, load_preset, parse_floats, parse_matrix, parse_sweep,
                     preset_names)
from .diffraction import (DiffractionSpectrum, classify_spectrum, default_step, model_set_spectrum, periodogram,
                          predicted_spectrum, uniform_grid)
from .gibbs import (Configuration, FixedBoundary, Kernel, MetricSpec, dobrushin_check, high_temperature_threshold,
                    ising_potential, read_samples_csv, sample_bernoulli, sample_gibbs, write_samples_csv)
from .pointset import (PRESET_SCHEMES, fibonacci_scheme, generate_lattice_patch, generate_model_set_patch,
                       read_patch_csv, write_patch_csv)

log = logging.getLogger("diffractlab")

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15


def splitmix64(x: int) -> int:
    z = (x + GOLDEN_GAMMA) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def chain_seed(seed: int, chain: int) -> int:
    """Seed of chain ``chain``: ``splitmix64(seed + chain)`` in 64-bit arithmetic."""
    return splitmix64((seed + chain) & MASK64)


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


FILES = {
    "patch.csv": "generate",
    "dobrushin.txt": "dobrushin",
    "samples.csv": "sample",
    "autocorr.csv": "autocorr",
    "covariance.csv": "autocorr",
    "spectrum_predicted.csv": "diffract",
    "spectrum_empirical.csv": "diffract",
    "spectrum_predicted_2r.csv": "diffract",
    "spectrum_empirical_2r.csv": "diffract",
    "classification.txt": "classify",
}


@dataclass
class Context:
    config: ExperimentConfig
    out: Path

    def path(self, name: str) -> Path:
        return self.out / name

    def require(self, name: str) -> Path:
        p = self.path(name)
        if not p.is_file():
            stage = FILES.get(name, "an earlier")
            raise StageError("input", f"missing {name}: run the '{stage}' stage first")
        return p


# -- builders ------------------------------------------------------------------

def build_patch(cfg: ExperimentConfig, radius: float | None = None):
    ps = cfg.pointset
    r = ps.radius if radius is None else radius
    if ps.kind == "lattice":
        return generate_lattice_patch(np.array(parse_matrix(ps.basis)), r)
    if ps.kind == "model_set":
        if ps.preset == "fibonacci":
            scheme = fibonacci_scheme(ps.window_offset)
        elif ps.preset in PRESET_SCHEMES:
            scheme = PRESET_SCHEMES[ps.preset]()
        else:
            raise ValueError(f"unknown model-set preset {ps.preset!r}")
        return generate_model_set_patch(scheme, r)
    raise ValueError(f"unknown point set kind {ps.kind!r}")


def build_kernel(cfg: ExperimentConfig) -> Kernel:
    p = cfg.potential
    trunc = p.truncation if p.truncation > 0 else None
    return Kernel(p.kernel, p.J0, p.range, p.kappa, p.q, trunc)


def build_potential(cfg: ExperimentConfig, beta: float | None = None):
    p = cfg.potential
    if p.mode not in ("bernoulli", "gibbs", "deterministic"):
        raise ValueError(f"unknown potential mode {p.mode!r}")
    values = tuple(parse_floats(p.species_values))
    if len(values) < 2:
        values = values + (0.0,)  # single species: a dummy second value keeps PotentialSpec well formed
    b = (p.beta if p.mode == "gibbs" else 0.0) if beta is None else beta
    return ising_potential(b, build_kernel(cfg), values)


def build_metric(cfg: ExperimentConfig) -> MetricSpec:
    a = cfg.analysis
    return MetricSpec(a.metric, a.metric_t, a.metric_p)


def species_values(cfg: ExperimentConfig) -> np.ndarray:
    return np.array(parse_floats(cfg.potential.species_values))


def build_grid(cfg: ExperimentConfig, patch):
    a = cfg.analysis
    step = a.k_step if a.k_step > 0 else default_step(patch.radius)
    return uniform_grid(a.k_lo, a.k_hi, step, patch.dim)


def draw_samples(cfg: ExperimentConfig, patch, seed: int) -> list[Configuration]:
    p, s = cfg.potential, cfg.sampler
    if p.mode == "deterministic":
        return [Configuration(patch, np.zeros(len(patch), dtype=np.int64))]
    out: list[Configuration] = []
    for chain in range(max(1, s.chains)):
        cs = chain_seed(seed, chain)
        if p.mode == "bernoulli":
            out += sample_bernoulli(patch, parse_floats(p.probabilities), s.samples, seed=cs)
        else:
            pot = build_potential(cfg)
            boundary = s.boundary
            if boundary == "fixed":
                init = sample_bernoulli(patch, np.full(pot.n_species, 1.0 / pot.n_species), 1, seed=cs)[0]
                boundary = FixedBoundary(init, s.boundary_width)
            elif boundary != "free":
                raise ValueError(f"unknown boundary {boundary!r}")
            out += sample_gibbs(patch, pot, s.sweeps, s.burn_in, s.thinning, seed=cs, boundary=boundary)
    return out


def covariance_table(cfg: ExperimentConfig, patch, samples) -> AutocorrelationTable:
    a = cfg.analysis
    vals = species_values(cfg)
    periodic = a.periodic and patch.is_lattice and patch.dim == 1
    if cfg.potential.mode == "deterministic":
        eta = eta_unweighted(patch, a.cutoff, periodic=periodic)
        return AutocorrelationTable(eta.z, np.zeros(len(eta.z), dtype=complex), "covariance", patch.radius,
                                    len(samples), a.cutoff, np.zeros(len(eta.z)))
    mode = a.covariance_mode if patch.is_lattice else "ensemble"
    return covariance_estimate(patch, samples, a.cutoff, mode=mode, values=vals, periodic=periodic)


def spectra(cfg: ExperimentConfig, patch, samples, cov: AutocorrelationTable):
    """Empirical and predicted spectra for one patch."""
    a = cfg.analysis
    vals = species_values(cfg)
    grid = build_grid(cfg, patch)
    emp = periodogram(patch, grid, samples, values=vals, threshold=a.threshold)
    h = weights_matrix(samples, vals)
    mean_sq = float(abs(h.mean()) ** 2)
    cov_part = cov.scaled(len(patch) / patch.volume)
    k_window = a.k_window if a.k_window > 0 else None
    if patch.is_lattice:
        periodic = a.periodic and patch.dim == 1
        pp = eta_unweighted(patch, a.cutoff, periodic=periodic).scaled(mean_sq, kind="weighted_eta")
        pred, _ = predicted_spectrum(patch, (pp, cov_part, math.nan), grid, k_window)
    else:
        pred = model_set_spectrum(patch, mean_sq, cov_part, grid, threshold=a.threshold)
    return emp, pred


# -- stages --------------------------------------------------------------------

def stage_generate(ctx: Context) -> None:
    patch = build_patch(ctx.config)
    write_patch_csv(patch, ctx.path("patch.csv"))
    log.info("generate: %d points, r=%g", len(patch), patch.radius)


def stage_dobrushin(ctx: Context) -> None:
    cfg = ctx.config
    patch = read_patch_csv(ctx.require("patch.csv"))
    metric = build_metric(cfg)
    pot = build_potential(cfg)
    lines = [f"mode={cfg.potential.mode}", dobrushin_check(pot, patch, metric).to_text().rstrip("\n")]
    if cfg.potential.mode == "gibbs":
        lines.append(f"high_temperature_threshold={high_temperature_threshold(pot, metric, patch)!r}")
    for n, beta in enumerate(parse_sweep(cfg.analysis.beta_sweep)):
        rep = dobrushin_check(build_potential(cfg, beta), patch, metric)
        lines += [f"sweep.{n}.beta={beta!r}", f"sweep.{n}.criterion_value={rep.criterion_value!r}",
                  f"sweep.{n}.satisfied={'true' if rep.satisfied else 'false'}"]
    ctx.path("dobrushin.txt").write_text("\n".join(lines) + "\n", newline="\n")


def stage_sample(ctx: Context) -> None:
    patch = read_patch_csv(ctx.require("patch.csv"))
    samples = draw_samples(ctx.config, patch, ctx.config.sampler.seed)
    write_samples_csv(samples, ctx.path("samples.csv"))
    log.info("sample: %d samples", len(samples))


def _load_samples(ctx: Context, patch):
    return read_samples_csv(ctx.require("samples.csv"), patch)


def stage_autocorr(ctx: Context) -> None:
    cfg = ctx.config
    patch = read_patch_csv(ctx.require("patch.csv"))
    samples = _load_samples(ctx, patch)
    periodic = cfg.analysis.periodic and patch.is_lattice and patch.dim == 1
    eta = eta_weighted(patch, samples, cfg.analysis.cutoff, values=species_values(cfg), periodic=periodic)
    eta.write_csv(ctx.path("autocorr.csv"))
    covariance_table(cfg, patch, samples).write_csv(ctx.path("covariance.csv"))


def stage_diffract(ctx: Context) -> None:
    cfg = ctx.config
    patch = read_patch_csv(ctx.require("patch.csv"))
    samples = _load_samples(ctx, patch)
    cov = AutocorrelationTable.read_csv(ctx.require("covariance.csv"))
    emp, pred = spectra(cfg, patch, samples, cov)
    emp.write_csv(ctx.path("spectrum_empirical.csv"))
    pred.write_csv(ctx.path("spectrum_predicted.csv"))
    if cfg.analysis.refine:
        big = build_patch(cfg, 2.0 * patch.radius)
        big_samples = draw_samples(cfg, big, cfg.sampler.seed)
        emp2, pred2 = spectra(cfg, big, big_samples, covariance_table(cfg, big, big_samples))
        emp2.write_csv(ctx.path("spectrum_empirical_2r.csv"))
        pred2.write_csv(ctx.path("spectrum_predicted_2r.csv"))


def stage_classify(ctx: Context) -> None:
    emp = DiffractionSpectrum.read_csv(ctx.require("spectrum_empirical.csv"))
    pred = DiffractionSpectrum.read_csv(ctx.require("spectrum_predicted.csv"))
    refinement = None
    if ctx.config.analysis.refine:
        refinement = (DiffractionSpectrum.read_csv(ctx.require("spectrum_empirical_2r.csv")),
                      DiffractionSpectrum.read_csv(ctx.require("spectrum_predicted_2r.csv")))
    result = classify_spectrum(emp, pred, refinement)
    ctx.path("classification.txt").write_text(result.to_text(), newline="\n")


def read_key_values(path: Path) -> dict:
    out = {}
    for line in path.read_text().splitlines():
        if "=" in line and not line.startswith("#"):
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def report_checks(cfg: ExperimentConfig, cls: dict, dob: dict | None) -> list[tuple[str, bool, str]]:
    """``(name, passed, detail)`` for every declared tolerance."""
    rc = cfg.report
    checks = []
    n = int(cls.get("matched_peaks", 0))
    if n:
        err = float(cls["max_relative_weight_error"])
        checks.append(("peak_weights", abs(err) <= rc.peak_tolerance,
                       f"max relative error {err:.4g} (tolerance {rc.peak_tolerance:g})"))
    heavy = [k for k, v in cls.items() if k.startswith("unmatched.") and k.endswith(".weight")
             and float(v) > rc.min_peak_weight]
    if heavy:
        checks.append(("unmatched_peaks", False,
                       f"{len(heavy)} predicted peaks above weight {rc.min_peak_weight:g} not found"))
    bg, expected = float(cls["background"]), float(cls.get("predicted_background", "nan"))
    if math.isfinite(expected) and expected > 0:
        rel = (bg - expected) / expected
        checks.append(("background", abs(rel) <= rc.background_tolerance,
                       f"empirical {bg:.6g} vs predicted {expected:.6g} (relative {rel:.3g}, "
                       f"tolerance {rc.background_tolerance:g})"))
    if "residual_ratio" in cls:
        ratio = float(cls["residual_ratio"])
        checks.append(("residual_scaling", ratio < rc.residual_ratio_max,
                       f"residual(2r)/residual(r) = {ratio:.4g} (must be < {rc.residual_ratio_max:g})"))
    if rc.require_dobrushin:
        ok = dob is not None and dob.get("satisfied") == "true"
        detail = "no dobrushin.txt" if dob is None else f"criterion {dob.get('criterion_value')}"
        checks.append(("dobrushin", ok, detail))
    return checks


def stage_report(ctx: Context) -> int:
    cls = read_key_values(ctx.require("classification.txt"))
    dob_path = ctx.path("dobrushin.txt")
    dob = read_key_values(dob_path) if dob_path.is_file() else None
    checks = report_checks(ctx.config, cls, dob)
    lines = [f"{'PASS' if ok else 'FAIL'} {name}: {detail}" for name, ok, detail in checks]
    failed = sum(not ok for _, ok, _ in checks)
    lines.append(f"summary: {len(checks) - failed}/{len(checks)} checks passed")
    text = "\n".join(lines) + "\n"
    ctx.path("report.txt").write_text(text, newline="\n")
    sys.stdout.write(text)
    return 2 if failed else 0


def write_manifest(ctx: Context) -> None:
    import numba
    import scipy

    files = {}
    for p in sorted(ctx.out.iterdir()):
        if p.is_file() and p.name != "manifest.json":
            files[p.name] = hashlib.sha256(p.read_bytes()).hexdigest()
    manifest = {
        "config_sha256": ctx.config.sha256(),
        "versions": {"diffractlab": __version__, "python": platform.python_version(), "numpy": np.__version__,
                     "scipy": scipy.__version__, "numba": numba.__version__},
        "files": files,
    }
    ctx.path("manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", newline="\n")


STAGES = {
    "generate": stage_generate,
    "dobrushin": stage_dobrushin,
    "sample": stage_sample,
    "autocorr": stage_autocorr,
    "diffract": stage_diffract,
    "classify": stage_classify,
}
PIPELINE = ["generate", "dobrushin", "sample", "autocorr", "diffract", "classify"]


def run_stage(ctx: Context, name: str) -> int:
    try:
        if name == "report":
            return stage_report(ctx)
        STAGES[name](ctx)
        return 0
    except StageError:
        raise
    except (ValueError, OSError, KeyError) as exc:
        raise StageError(name, str(exc)) from exc


def run(config: ExperimentConfig, out) -> int:
    """Full pipeline followed by the tolerance report; returns the exit status."""
    ctx = Context(config, Path(out))
    ctx.out.mkdir(parents=True, exist_ok=True)
    ctx.path("config.cfg").write_text(config.to_text(), newline="\n")
    try:
        for name in PIPELINE:
            run_stage(ctx, name)
        return run_stage(ctx, "report")
    finally:
        write_manifest(ctx)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="diffractlab", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in [*PIPELINE, "report", "run"]:
        p = sub.add_parser(name)
        src = p.add_mutually_exclusive_group()
        src.add_argument("--config", type=Path, help="key=value configuration file")
        src.add_argument("--preset", choices=preset_names(), help="bundled configuration")
        p.add_argument("--out", type=Path, default=Path("out"), help="output directory (default: ./out)")
        p.add_argument("--seed", type=int, help="override sampler.seed")
        p.add_argument("-v", "--verbose", action="store_true")
    sub.add_parser("presets", help="list bundled presets")
    return parser


def resolve_config(args) -> ExperimentConfig:
    if args.config is not None:
        cfg = load_config(args.config)
    elif args.preset is not None:
        cfg = load_preset(args.preset)
    elif (args.out / "config.cfg").is_file():
        cfg = load_config(args.out / "config.cfg")
    else:
        raise StageError("config", "no --config or --preset given and no config.cfg in the output directory")
    if args.seed is not None:
        cfg.sampler.seed = args.seed
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "presets":
        print("\n".join(preset_names()))
        return 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = resolve_config(args)
        if args.command == "run":
            return run(cfg, args.out)
        ctx = Context(cfg, args.out)
        ctx.out.mkdir(parents=True, exist_ok=True)
        ctx.path("config.cfg").write_text(cfg.to_text(), newline="\n")
        try:
            return run_stage(ctx, args.command)
        finally:
            write_manifest(ctx)
    except (StageError, ValueError, OSError) as exc:
        print(f"diffractlab: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
