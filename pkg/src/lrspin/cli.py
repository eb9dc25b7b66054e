"""Command-line entry point: ``lrspin <subcommand> ...``.

Every subcommand writes into ``--out`` only, through a temporary file and a
rename, and finishes with ``manifest.json`` listing each artifact with its
SHA-256 digest. Exit status: 0 success, 1 a check failed, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import os
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from . import __version__, certifier, exact, inequalities, matrix_lemma, sampler
from .model import ModelError, build_model, load_spec

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
PIPELINE_RADII = (1, 2) + certifier.RADII


class UsageError(Exception):
    """Bad input; reported on one line with exit status 2."""


# -- output helpers -------------------------------------------------------------------


class Outputs:
    """Atomic writer confined to one directory; records digests for the manifest."""

    def __init__(self, root: str):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.files: dict[str, str] = {}

    def write_bytes(self, name: str, data: bytes) -> Path:
        if Path(name).name != name:
            raise ValueError(f"output name must be a bare file name: {name}")
        fd, tmp = tempfile.mkstemp(dir=self.root, prefix=f".{name}.", suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
            os.replace(tmp, self.root / name)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
        self.files[name] = hashlib.sha256(data).hexdigest()
        return self.root / name

    def write_json(self, name: str, obj) -> Path:
        return self.write_bytes(name, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())

    def write_csv(self, name: str, header, rows) -> Path:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=list(header), lineterminator="\r\n")
        w.writeheader()
        for r in rows:
            w.writerow(r)
        return self.write_bytes(name, buf.getvalue().encode())

    def manifest(self, command: str, inputs: dict, seeds: dict, started: float) -> Path:
        return self.write_json(
            "manifest.json",
            {
                "tool": "lrspin",
                "version": __version__,
                "command": command,
                "inputs": inputs,
                "seeds": seeds,
                "started": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(started)),
                "finished": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
                "outputs": [{"path": k, "sha256": v} for k, v in sorted(self.files.items())],
            },
        )


def _read_json(path: str, flag: str):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise UsageError(f"{flag}: no such file {path!r}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{flag}: malformed JSON in {path!r} ({exc.msg}, line {exc.lineno})") from None


def _model_spec(path: str) -> dict:
    if not os.path.exists(path):
        raise UsageError(f"--spec: no such file {path!r}")
    try:
        return load_spec(path)
    except ModelError as exc:
        raise UsageError(f"--spec: {exc}") from None


def _chain_config(args) -> sampler.ChainConfig:
    data = _read_json(args.chain, "--chain") if args.chain else {}
    if not isinstance(data, dict):
        raise UsageError("--chain: chain config must be a JSON object")
    if args.seed is not None:
        data = {**data, "seed": args.seed}
    try:
        return sampler.ChainConfig.from_dict(data)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"--chain: {exc}") from None


def _f(x) -> str:
    return repr(float(x))


# -- subcommands ----------------------------------------------------------------------


def cmd_exact_cov(args, out: Outputs):
    spec = _model_spec(args.spec)
    model = build_model(spec)
    if model.n_sites > 4:
        raise UsageError("--spec: field 'n_sites' must be <= 4 for exact-cov")
    qspec = exact.QuadratureSpec(rel_tol=args.tolerance)
    cov, err = exact.covariance_matrix_exact(model, qspec)
    n = model.n_sites
    rows = [{"i": i, "j": j, "cov": _f(cov[i, j]), "err": _f(err[i, j])} for i in range(n) for j in range(i, n)]
    out.write_json("spec.json", spec)
    out.write_csv("exact_cov.csv", ["i", "j", "cov", "err"], rows)
    return EXIT_OK, {"spec": spec}, {}


def _sample(args, spec, out: Outputs, prefix: str = ""):
    model = build_model(spec)
    cfg = _chain_config(args)
    try:
        if args.max_distance is not None:
            table, stats = sampler.run_translation_averaged(model, cfg, args.max_distance, args.margin, args.threads)
        else:
            table, stats = sampler.run_chains(model, cfg, None, args.threads)
    except sampler.DivergenceError as exc:
        raise UsageError(f"sampler diverged: {exc}") from None
    except ValueError as exc:
        raise UsageError(f"--max-distance/--margin: {exc}") from None
    rows = [{k: (_f(v) if isinstance(v, float) else v) for k, v in r.items()} for r in table.rows()]
    out.write_csv(f"{prefix}sample_cov.csv", ["i", "j", "cov", "se", "tau_int"], rows)
    diag = {"chain_config": cfg.to_dict(), "diagnostics": stats.to_dict(),
            "translation_averaged": table.translation_averaged}
    out.write_json(f"{prefix}sample_run.json", diag)
    return model, cfg, table, stats


def cmd_sample_cov(args, out: Outputs):
    spec = _model_spec(args.spec)
    out.write_json("spec.json", spec)
    _, cfg, _, stats = _sample(args, spec, out)
    return EXIT_OK, {"spec": spec, "chain_config": cfg.to_dict()}, {"chain_seed": cfg.seed, "chains": stats.seeds}


def cmd_check_inequalities(args, out: Outputs):
    suites = inequalities.SUITES if args.suite == "all" else (args.suite,)
    reports = inequalities.run_all(args.seed or 0, args.count, suites)
    rows = [r.row() for r in reports]
    header = list(rows[0]) if rows else ["check", "instance", "violation", "tolerance", "provenance", "se", "verdict"]
    out.write_csv("inequalities.csv", header, rows)
    summary = {}
    for s in suites:
        mine = [r for r in reports if r.name == s]
        summary[s] = {
            "count": len(mine),
            "failures": sum(not r.passed for r in mine),
            "worst_violation": max((float(r.violation) for r in mine), default=None),
        }
    out.write_json("inequalities_summary.json", summary)
    failed = any(not r.passed for r in reports)
    return (EXIT_FAIL if failed else EXIT_OK), {"suite": args.suite, "count": args.count}, {"seed": args.seed or 0}


def cmd_matrix_lemma(args, out: Outputs):
    if args.max_size < 2:
        raise UsageError("--max-size: must be at least 2")
    rows, failed = [], False
    for k, m in enumerate(matrix_lemma.corpus(args.seed or 0, args.count, sizes=(2, args.max_size))):
        rep = matrix_lemma.verify_inverse_positivity(m, tol=args.tolerance)
        failed |= not rep.passed
        rows.append({
            "instance": k, "n": rep.n, "delta": _f(rep.delta), "min_entry": _f(rep.min_entry),
            "max_row_sum": _f(rep.max_row_sum), "row_sum_bound": _f(rep.row_sum_bound),
            "residual": _f(rep.residual), "verdict": "pass" if rep.passed else "fail",
        })
    out.write_csv("matrix_lemma.csv", list(rows[0]) if rows else ["instance"], rows)
    return (EXIT_FAIL if failed else EXIT_OK), {"count": args.count, "max_size": args.max_size}, {"seed": args.seed or 0}


def _params(path: str) -> certifier.CertifierParams:
    data = _read_json(path, "--spec")
    if not isinstance(data, dict):
        raise UsageError("--spec: certifier params must be a JSON object")
    try:
        return certifier.CertifierParams.from_dict(data)
    except (certifier.CertifierError, TypeError) as exc:
        raise UsageError(f"--spec: {exc}") from None


def _certificate_json(result, tried) -> dict:
    base = {"radii_tried": [{"a": a, "c_tilde": c} for a, c in tried], "a": result.a,
            "contraction": {k: getattr(result.contraction, k)
                            for k in ("inner", "outer_near", "outer_far", "c_tilde")}}
    if isinstance(result, certifier.CertifiedBound):
        return {**base, "certified": True, "exponent": result.exponent, "C_out": result.C_out,
                "d_star": result.d_star}
    return {**base, "certified": False, "reason": result.reason, "d": result.d, "term": result.term}


def _write_ledger(out: Outputs, name: str, ledger):
    header = ["d", "l_min", "l", "c_tilde", "T", "R", "total", "scaled", "fallback"]
    rows = [{k: (_f(v) if isinstance(v, float) else v) for k, v in r.to_dict().items()} for r in ledger]
    out.write_csv(name, header, rows)


def cmd_certify(args, out: Outputs):
    params = _params(args.spec)
    if args.search:
        result, tried = certifier.search_radius(params)
    else:
        result = certifier.certify_decay(params)
        tried = [(params.a, result.contraction.c_tilde)]
    _write_ledger(out, "ledger.csv", result.ledger)
    out.write_json("certificate.json", _certificate_json(result, tried))
    ok = isinstance(result, certifier.CertifiedBound)
    return (EXIT_OK if ok else EXIT_FAIL), {"params": params.to_dict()}, {}


def _read_table(path: str) -> sampler.CovarianceTable:
    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
    except FileNotFoundError:
        raise UsageError(f"--input: no such file {path!r}") from None
    if not rows:
        raise UsageError("--input: covariance CSV has no rows")
    for key in ("i", "j", "cov", "se"):
        if key not in rows[0]:
            raise UsageError(f"--input: missing column '{key}'")
    try:
        pairs = [(int(r["i"]), int(r["j"])) for r in rows]
        cov = [float(r["cov"]) for r in rows]
        se = [float(r["se"]) for r in rows]
        tau = [float(r.get("tau_int") or "nan") for r in rows]
    except ValueError as exc:
        raise UsageError(f"--input: non-numeric value ({exc})") from None
    return sampler.CovarianceTable(pairs, cov, se, tau, provenance="file")


def cmd_fit_decay(args, out: Outputs):
    table = _read_table(args.input)
    try:
        fit = certifier.fit_decay(table, args.d_min, args.d_max, seed=args.seed or 0)
    except certifier.FitError as exc:
        out.write_json("fit.json", {"error": str(exc)})
        print(f"fit-decay: {exc}", file=sys.stderr)
        return EXIT_FAIL, {"input": args.input}, {"seed": args.seed or 0}
    out.write_json("fit.json", fit.to_dict())
    return EXIT_OK, {"input": args.input, "d_min": args.d_min, "d_max": args.d_max}, {"seed": args.seed or 0}


# -- pipeline -------------------------------------------------------------------------


def pipeline_params(spec: dict, table, d_max: float) -> certifier.CertifierParams:
    """Certifier inputs derived from a model spec and its sampled covariances.

    The Simon coupling of the doubled measure is ``2|M|``, so ``C_M`` is twice
    the model's constant. ``C2`` is the sampled variance, which is twice the
    average doubled second moment; the factor two is the safety margin for
    the supremum over conditioning values. The preliminary bound takes
    ``C0 = C2`` with exponent ``min(1/2, alpha/2)``.
    """
    alpha = spec["alpha"]
    d, cov, _ = table.by_distance()
    C2 = float(cov[d == 0][0])
    return certifier.CertifierParams(
        C_M=2 * spec["coupling_C"], alpha=alpha, C0=C2, alpha_tilde=min(0.5, alpha / 2), C2=C2,
        a=PIPELINE_RADII[0], target_alpha_hat=alpha / 2, d_min=1, d_max=max(d_max, 1000),
    )


def compare_to_bound(table, fit, result, resolve: float = 3.0) -> list[dict]:
    """Resolvable distances against twice the certified doubled-measure bound.

    The lattice covariance is ``2 E_q cov_q``, hence the factor two.
    """
    d, cov, se = table.by_distance()
    rows = []
    for dist, c, s in zip(d, cov, se):
        if dist == 0 or dist not in fit.distances:
            continue
        b = 2 * certifier.bound_at_result(result, int(dist))
        rows.append({"d": int(dist), "cov": float(c), "se": float(s), "bound": b,
                     "violated": bool(abs(c) - resolve * s > b)})
    return rows


def svg_loglog(series: list[dict], title: str = "") -> str:
    """Minimal log-log SVG: each series has x, y, and style 'points' or 'line'."""
    W, H, L, B, T, Rm = 640, 440, 70, 50, 30, 20
    xs = np.concatenate([np.asarray(s["x"], float) for s in series])
    ys = np.concatenate([np.asarray(s["y"], float) for s in series])
    ok = (xs > 0) & (ys > 0) & np.isfinite(ys)
    lx0, lx1 = math.floor(np.log10(xs[ok].min())), math.ceil(np.log10(xs[ok].max()))
    ly0, ly1 = math.floor(np.log10(ys[ok].min())), math.ceil(np.log10(ys[ok].max()))
    lx1, ly1 = max(lx1, lx0 + 1), max(ly1, ly0 + 1)

    def px(x):
        return L + (math.log10(x) - lx0) / (lx1 - lx0) * (W - L - Rm)

    def py(y):
        return H - B - (math.log10(y) - ly0) / (ly1 - ly0) * (H - B - T)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">',
             f'<rect width="{W}" height="{H}" fill="white"/>',
             f'<text x="{W / 2}" y="18" text-anchor="middle">{title}</text>',
             f'<rect x="{L}" y="{T}" width="{W - L - Rm}" height="{H - B - T}" fill="none" stroke="black"/>']
    for e in range(lx0, lx1 + 1):
        parts.append(f'<text x="{px(10**e):.1f}" y="{H - B + 18}" text-anchor="middle">1e{e}</text>')
    for e in range(ly0, ly1 + 1):
        parts.append(f'<text x="{L - 6}" y="{py(10**e) + 4:.1f}" text-anchor="end">1e{e}</text>')
    parts.append(f'<text x="{W / 2}" y="{H - 12}" text-anchor="middle">distance d</text>')
    for k, s in enumerate(series):
        x, y = np.asarray(s["x"], float), np.asarray(s["y"], float)
        m = (x > 0) & (y > 0) & np.isfinite(y)
        colour = s.get("color", "black")
        if s.get("style") == "line":
            pts = " ".join(f"{px(a):.1f},{py(b):.1f}" for a, b in zip(x[m], y[m]))
            dash = ' stroke-dasharray="6,4"' if s.get("dashed") else ""
            parts.append(f'<polyline points="{pts}" fill="none" stroke="{colour}"{dash}/>')
        else:
            for a, b in zip(x[m], y[m]):
                parts.append(f'<circle cx="{px(a):.1f}" cy="{py(b):.1f}" r="3" fill="{colour}"/>')
        parts.append(f'<text x="{W - Rm - 8}" y="{T + 16 + 15 * k}" text-anchor="end" fill="{colour}">{s["label"]}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def run_pipeline(spec: dict, cfg: sampler.ChainConfig, out: Outputs, max_distance: int, margin: int,
                 threads: int = 1) -> dict:
    """sample -> fit -> certify -> compare; writes every intermediate file."""
    model = build_model(spec)
    table, stats = sampler.run_translation_averaged(model, cfg, max_distance, margin, threads)
    rows = [{k: (_f(v) if isinstance(v, float) else v) for k, v in r.items()} for r in table.rows()]
    out.write_csv("sample_cov.csv", ["i", "j", "cov", "se", "tau_int"], rows)
    out.write_json("sample_run.json", {"chain_config": cfg.to_dict(), "diagnostics": stats.to_dict()})
    fit = certifier.fit_decay(table, 1, max_distance, seed=cfg.seed)
    out.write_json("fit.json", fit.to_dict())
    params = pipeline_params(spec, table, max_distance)
    result, tried = certifier.search_radius(params, PIPELINE_RADII)
    _write_ledger(out, "ledger.csv", result.ledger)
    out.write_json("certificate.json", _certificate_json(result, tried))
    certified = isinstance(result, certifier.CertifiedBound)
    comparison = compare_to_bound(table, fit, result) if certified else []
    d, cov, _ = table.by_distance()
    series = [{"x": d[d > 0], "y": np.abs(cov[d > 0]), "label": "|cov| sampled", "color": "black"}]
    grid = np.arange(1, max_distance + 1)
    series.append({"x": grid, "y": fit(grid), "style": "line", "label": f"fit d^-{fit.alpha_fit:.2f}",
                   "color": "#1f77b4"})
    if certified:
        series.append({"x": grid, "y": [2 * certifier.bound_at_result(result, int(g)) for g in grid],
                       "style": "line", "dashed": True, "label": "2 x certified bound", "color": "#d62728"})
    out.write_bytes("plot.svg", svg_loglog(series, "covariance decay").encode())
    report = {
        "converged": stats.converged,
        "fit": fit.to_dict(),
        "certified": certified,
        "certificate": _certificate_json(result, tried),
        "comparison": comparison,
        "violations": [r["d"] for r in comparison if r["violated"]],
    }
    out.write_json("report.json", report)
    return report


def cmd_pipeline(args, out: Outputs):
    spec = _model_spec(args.spec)
    out.write_json("spec.json", spec)
    cfg = _chain_config(args)
    if args.max_distance is None:
        args.max_distance = 16
    try:
        report = run_pipeline(spec, cfg, out, args.max_distance, args.margin, args.threads)
    except certifier.FitError as exc:
        out.write_json("report.json", {"error": f"fit-decay: {exc}"})
        print(f"lrspin pipeline: fit-decay: {exc}", file=sys.stderr)
        return EXIT_FAIL, {"spec": spec, "chain_config": cfg.to_dict()}, {"chain_seed": cfg.seed}
    except ValueError as exc:
        raise UsageError(f"--max-distance/--margin: {exc}") from None
    ok = report["certified"] and not report["violations"] and report["fit"]["ci_low"] >= 1.5
    return (EXIT_OK if ok else EXIT_FAIL), {"spec": spec, "chain_config": cfg.to_dict()}, {"chain_seed": cfg.seed}


# -- argument parsing -----------------------------------------------------------------


def _common(p, spec_help=None, seed=True, tolerance=None):
    if spec_help:
        p.add_argument("--spec", required=True, metavar="FILE", help=spec_help)
    p.add_argument("--out", default="out", metavar="DIR", help="output directory (created if missing)")
    if seed:
        p.add_argument("--seed", type=int, default=None, metavar="U64",
                       help="seed; overrides the chain config's seed where one exists (None means 0)")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1, metavar="N",
                   help="worker threads; defaults to the available parallelism")
    if tolerance is not None:
        p.add_argument("--tolerance", type=float, default=tolerance, metavar="F", help="numerical tolerance")


def _sampling(p):
    p.add_argument("--chain", default=None, metavar="FILE",
                   help="chain config JSON (seed, n_chains, burn_in, sweeps, scan, proposal_sigma, "
                        "target_acceptance, kernel_eps); None uses the built-in defaults")
    p.add_argument("--max-distance", type=int, default=None, metavar="D",
                   help="translation-average distances 0..D instead of all pairs")
    p.add_argument("--margin", type=int, default=0, metavar="M",
                   help="sites excluded at each end from translation averages")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="lrspin", description=__doc__.splitlines()[0], formatter_class=fmt)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("exact-cov", help="quadrature covariances for n <= 4", formatter_class=fmt)
    _common(p, "model spec JSON", seed=False, tolerance=1e-9)
    p.set_defaults(func=cmd_exact_cov)

    p = sub.add_parser("sample-cov", help="MCMC covariance estimates", formatter_class=fmt)
    _common(p, "model spec JSON")
    _sampling(p)
    p.set_defaults(func=cmd_sample_cov)

    p = sub.add_parser("check-inequalities", help="seeded correlation-inequality suites", formatter_class=fmt)
    _common(p)
    p.add_argument("--suite", default="all", choices=("all",) + inequalities.SUITES, help="suite to run")
    p.add_argument("--count", type=int, default=50, metavar="N", help="instances per suite")
    p.set_defaults(func=cmd_check_inequalities)

    p = sub.add_parser("matrix-lemma", help="inverse positivity of random SDD M-matrices", formatter_class=fmt)
    _common(p, tolerance=1e-10)
    p.add_argument("--count", type=int, default=1000, metavar="N", help="number of matrices")
    p.add_argument("--max-size", type=int, default=64, metavar="S", help="largest matrix size")
    p.set_defaults(func=cmd_matrix_lemma)

    p = sub.add_parser("certify", help="recursive decay certificate", formatter_class=fmt)
    _common(p, "certifier params JSON", seed=False)
    p.add_argument("--search", action="store_true", help=f"search the radius over {certifier.RADII}")
    p.set_defaults(func=cmd_certify)

    p = sub.add_parser("fit-decay", help="power-law fit of a covariance CSV", formatter_class=fmt)
    _common(p)
    p.add_argument("--input", required=True, metavar="FILE", help="CSV with columns i, j, cov, se")
    p.add_argument("--d-min", type=float, default=1, help="smallest distance in the fit window")
    p.add_argument("--d-max", type=float, default=None, help="largest distance (None means all)")
    p.set_defaults(func=cmd_fit_decay)

    p = sub.add_parser("pipeline", help="sample, fit, certify and compare", formatter_class=fmt)
    _common(p, "model spec JSON")
    _sampling(p)
    p.set_defaults(func=cmd_pipeline, max_distance=16)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.threads is not None and args.threads < 1:
        print("lrspin: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    started = time.time()
    try:
        out = Outputs(args.out)
        status, inputs, seeds = args.func(args, out)
        out.manifest(args.command, inputs, seeds, started)
    except UsageError as exc:
        print(f"lrspin {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return status


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
