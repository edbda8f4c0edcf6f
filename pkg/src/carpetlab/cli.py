"""Command-line front end.

Subcommands cover validation, geometry dumps, resistance scaling, form
experiments, and random-walk experiments; `pipeline` chains stages from
a JSON config with dependency injection (the measured rho feeds the
form builders) and content-addressed result caching; `report` renders
summary tables and matplotlib figures from a directory of result
envelopes.

Exit codes: 0 success, 2 validation/config failure, 3 solver or
resource failure, 4 assertion-stage failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import sys
import tempfile
import time

import numpy as np

from . import __version__, forms, geometry, network, walk
from .geometry import CarpetSpec, StructuralError

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_SOLVER = 3
EXIT_ASSERTION = 4


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# result envelopes and cache
# ---------------------------------------------------------------------------


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def cache_key(spec: CarpetSpec, operation: str, params: dict) -> str:
    blob = _canonical(
        {
            "spec": spec.to_dict(),
            "operation": operation,
            "params": params,
            "version": __version__,
        }
    )
    return hashlib.sha256(blob.encode()).hexdigest()


def _atomic_write(path: str, text: str) -> None:
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_envelope(out_dir: str, spec: CarpetSpec, operation: str,
                   params: dict, payload: dict, wall_time: float) -> str:
    key = cache_key(spec, operation, params)
    env = {
        "key": key,
        "spec_hash": spec.content_hash(),
        "operation": operation,
        "params": params,
        "version": __version__,
        "payload": payload,
        "payload_sha256": hashlib.sha256(
            _canonical(payload).encode()
        ).hexdigest(),
        "wall_time": wall_time,
    }
    path = os.path.join(out_dir, key + ".json")
    _atomic_write(path, json.dumps(env, sort_keys=True, indent=1))
    return path


def read_envelope(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def cached_run(ctx: "Context", operation: str, params: dict):
    """Run an operation through the cache: returns (payload, path, hit)."""
    key = cache_key(ctx.spec, operation, params)
    path = os.path.join(ctx.out_dir, key + ".json")
    if ctx.cache and os.path.exists(path):
        try:
            env = read_envelope(path)
            if env.get("key") == key:
                return env["payload"], path, True
        except (ValueError, KeyError):
            pass  # corrupt envelope: recompute
    t0 = time.perf_counter()
    payload = OPS[operation](ctx, params)
    wall = time.perf_counter() - t0
    path = write_envelope(ctx.out_dir, ctx.spec, operation, params, payload, wall)
    return payload, path, False


class Context:
    """Carries the spec, output settings, and cross-stage dependencies."""

    def __init__(self, spec: CarpetSpec, out_dir: str, seed: int,
                 cache: bool, threads: int = 1):
        self.spec = spec
        self.out_dir = out_dir
        self.seed = seed
        self.cache = cache
        self.threads = threads

    def rho(self, n_max: int = 4) -> float:
        payload, _, _ = cached_run(self, "rho", {"n_max": n_max})
        return payload["rho_hat"]

    def beta0(self, n_max: int = 4) -> float:
        payload, _, _ = cached_run(self, "rho", {"n_max": n_max})
        return payload["beta0"]

    def timescale(self, n_max: int = 4) -> network.TimeScale:
        payload, _, _ = cached_run(self, "timescale", {"n_max": n_max})
        return network.TimeScale(self.spec.scale, self.spec.branching,
                                 payload["k"], payload["grid_r"],
                                 payload["grid_h"])


# ---------------------------------------------------------------------------
# operations (each maps (ctx, params) -> JSON-serializable payload)
# ---------------------------------------------------------------------------


def op_validate(ctx: Context, p: dict) -> dict:
    report = geometry.validate(ctx.spec, p["max_block_scale"])
    return {"passed": report.passed, "axioms": report.to_dict()}


def op_cells(ctx: Context, p: dict) -> dict:
    n = p["level"]
    ca = geometry.cells(ctx.spec, n)
    e = geometry.adjacency(ctx.spec, n, ca)
    return {
        "level": n,
        "count": int(len(ca)),
        "expected": ctx.spec.cell_count(n),
        "edges": int(len(e)),
        "cells": ca.tolist() if len(ca) <= 10000 else None,
    }


def op_resist(ctx: Context, p: dict) -> dict:
    builder = (network.crosswire_network if p["model"] == "crosswire"
               else network.cell_network)
    net = builder(ctx.spec, p["level"])
    res = network.effective_resistance(net, "face0", "face1")
    return {
        "model": p["model"],
        "level": p["level"],
        "vertices": net.n_vertices,
        "resistance": res.resistance,
        "residual": res.residual,
        "method": res.method,
    }


def op_rho(ctx: Context, p: dict) -> dict:
    return network.rho_estimate(ctx.spec, p["n_max"]).to_dict()


def op_gamma(ctx: Context, p: dict) -> dict:
    gam = network.gamma_sequence(ctx.spec, p["n_max"], model=p["model"])
    return {"model": p["model"], "n_max": p["n_max"], "gamma": gam}


def op_timescale(ctx: Context, p: dict) -> dict:
    gam = network.gamma_sequence(ctx.spec, p["n_max"])
    ts = network.time_scale(ctx.spec, gam)
    rho_hat = ctx.rho(p["n_max"])
    beta0 = ctx.beta0(p["n_max"])
    structure = network.gamma_structure_check(ctx.spec, gam, rho_hat, ts, beta0)
    return {"gamma": gam, "k": ts.k, "grid_r": ts.grid_r, "grid_h": ts.grid_h,
            "structure": structure}


def op_res_annulus(ctx: Context, p: dict) -> dict:
    ts = ctx.timescale(p["n_max"])
    return network.res_annulus_check(ctx.spec, p["level"],
                                     p["center"], p["radius"], ts)


def _build_form(ctx: Context, family: str, level: int) -> forms.DiscreteForm:
    rho = ctx.rho()
    builder = {"bb": forms.bb_form, "kz": forms.kz_form}[family]
    return builder(ctx.spec, level, rho)


def op_form_build(ctx: Context, p: dict) -> dict:
    form = _build_form(ctx, p["family"], p["level"])
    out = os.path.join(ctx.out_dir,
                       "form_%s_n%d.txt" % (p["family"], p["level"]))
    form.save(out)
    return {
        "family": p["family"],
        "level": p["level"],
        "cells": form.n_cells,
        "markov": form.markov,
        "conservative": form.conservative,
        "normalization": form.normalization,
        "file": os.path.basename(out),
    }


def op_form_invariance(ctx: Context, p: dict) -> dict:
    form = _build_form(ctx, p["family"], p["level"])
    proj = forms.folding_projector(ctx.spec, p["level"], p["fold_level"])
    rep = forms.invariance_check(form, proj, ctx.spec)
    return {
        "family": p["family"],
        "level": p["level"],
        "fold_level": p["fold_level"],
        "idempotent_exact": proj.idempotent_exact(),
        "passed": rep.invariant and proj.idempotent_exact(),
        **rep.to_dict(),
    }


def op_form_hilbert(ctx: Context, p: dict) -> dict:
    A = _build_form(ctx, "bb", p["level"])
    B = _build_form(ctx, "kz", p["level"])
    hd = forms.hilbert_data(A, B)
    return {"level": p["level"], "pair": "bb,kz", **hd.to_dict()}


def op_form_combine(ctx: Context, p: dict) -> dict:
    A = _build_form(ctx, "bb", p["level"])
    B = _build_form(ctx, "kz", p["level"])
    C, markov_ok, hd = forms.combine(A, B, p["delta"])
    return {
        "level": p["level"],
        "delta": p["delta"],
        "lambda": hd.inf,
        "markov": markov_ok,
        "conservative": C.conservative,
        "psd": C.psd_check(),
        "passed": C.conservative and C.psd_check(),
    }


def op_form_besov(ctx: Context, p: dict) -> dict:
    ts = ctx.timescale()
    form = forms.normalize(_build_form(ctx, "bb", p["level"]), ctx.spec)
    rng = np.random.default_rng(ctx.seed)
    ratios = []
    for _ in range(p["samples"]):
        f = rng.normal(size=form.n_cells)
        e = form.energy(f)
        if e <= 1e-12:
            continue
        nh = forms.besov_norm(ctx.spec, p["level"], f, ts)["N_H"]
        ratios.append(nh / e)
    return {
        "level": p["level"],
        "samples": len(ratios),
        "ratio_min": min(ratios),
        "ratio_max": max(ratios),
        "band": max(ratios) / min(ratios),
    }


def op_form_contract(ctx: Context, p: dict) -> dict:
    A = _build_form(ctx, "bb", p["level"])
    B = _build_form(ctx, "kz", p["level"])
    res = forms.contraction_experiment(ctx.spec, p["level"], [A, B],
                                       p["iterations"])
    return res


def op_walk_exit(ctx: Context, p: dict) -> dict:
    return walk.exit_time_scaling(ctx.spec, p["n_max"])


def _move_edges(spec: CarpetSpec, n: int):
    verts, edges = geometry.halfface_graph(spec, n)
    return verts, edges


def op_walk_move(ctx: Context, p: dict) -> dict:
    verts, edges = _move_edges(ctx.spec, p["level"])
    want = p["move_type"]
    pick = [e for e in edges if want in ("any", e[2])]
    if p["edge_index"] >= 0:
        pick = [edges[p["edge_index"]]]
    if not pick:
        raise ConfigError("no %s move at level %d" % (want, p["level"]))
    e = pick[0]
    cfg = walk.WalkConfig(seed=ctx.seed, samples=p["samples"])
    out = walk.move_probability(ctx.spec, p["level"], verts[e[0]], verts[e[1]],
                                cfg, depth=p["depth"])
    out["move_type"] = e[2]
    out["passed"] = bool(out["clears_floor"]) and not out["anomaly"]
    return out


def op_walk_couple(ctx: Context, p: dict) -> dict:
    x = geometry.GridPoint(p["resolution"], tuple(p["x"]))
    y = geometry.GridPoint(p["resolution"], tuple(p["y"]))
    cfg = walk.WalkConfig(seed=ctx.seed, samples=p["samples"])
    return walk.coupling_experiment(ctx.spec, p["level"], x, y, p["m"],
                                    p["radius"], cfg)


def op_walk_harnack(ctx: Context, p: dict) -> dict:
    return walk.harnack_ratio(ctx.spec, p["level"], p["center"], p["radius"])


def op_walk_heatkernel(ctx: Context, p: dict) -> dict:
    beta0 = ctx.beta0()
    ts = ctx.timescale() if p["mode"] == "matrix-power" else None
    cfg = walk.WalkConfig(seed=ctx.seed, samples=p["samples"])
    est = walk.heat_kernel(ctx.spec, p["level"], p["mode"], cfg, beta0, ts)
    out = est.to_dict()
    rel = abs(est.ds_hat - est.ds_reference) / est.ds_reference
    out["ds_rel_err"] = rel
    return out


OPS = {
    "validate": op_validate,
    "cells": op_cells,
    "resist": op_resist,
    "rho": op_rho,
    "gamma": op_gamma,
    "timescale": op_timescale,
    "res-annulus": op_res_annulus,
    "form-build": op_form_build,
    "form-check-invariance": op_form_invariance,
    "form-hilbert": op_form_hilbert,
    "form-combine": op_form_combine,
    "form-besov": op_form_besov,
    "form-contract": op_form_contract,
    "walk-exit": op_walk_exit,
    "walk-move": op_walk_move,
    "walk-couple": op_walk_couple,
    "walk-harnack": op_walk_harnack,
    "walk-heatkernel": op_walk_heatkernel,
}

# parameter schema per operation: name -> (converter, default); defaults of
# None mark required parameters
PARAMS = {
    "validate": {"max_block_scale": (int, 2)},
    "cells": {"level": (int, 1)},
    "resist": {"model": (str, "crosswire"), "level": (int, 1)},
    "rho": {"n_max": (int, 4)},
    "gamma": {"n_max": (int, 4), "model": (str, "crosswire")},
    "timescale": {"n_max": (int, 4)},
    "res-annulus": {"level": (int, 3), "center": (list, None),
                    "radius": (float, 0.1), "n_max": (int, 4)},
    "form-build": {"family": (str, "bb"), "level": (int, 2)},
    "form-check-invariance": {"family": (str, "bb"), "level": (int, 2),
                              "fold_level": (int, 1)},
    "form-hilbert": {"level": (int, 2)},
    "form-combine": {"level": (int, 2), "delta": (float, 0.01)},
    "form-besov": {"level": (int, 3), "samples": (int, 100)},
    "form-contract": {"level": (int, 3), "iterations": (int, 2)},
    "walk-exit": {"n_max": (int, 4)},
    "walk-move": {"level": (int, 1), "move_type": (str, "corner"),
                  "edge_index": (int, -1), "samples": (int, 100000),
                  "depth": (int, 2)},
    "walk-couple": {"level": (int, 3), "resolution": (int, 3),
                    "x": (list, None), "y": (list, None), "m": (int, 1),
                    "radius": (float, 0.4), "samples": (int, 20000)},
    "walk-harnack": {"level": (int, 3), "center": (list, None),
                     "radius": (float, 0.25)},
    "walk-heatkernel": {"level": (int, 3), "mode": (str, "matrix-power"),
                        "samples": (int, 50000)},
}

STAGE_ALIASES = {"heatkernel": "walk-heatkernel", "exit": "walk-exit",
                 "move": "walk-move", "couple": "walk-couple",
                 "harnack": "walk-harnack", "besov": "form-besov",
                 "hilbert": "form-hilbert", "combine": "form-combine",
                 "contract": "form-contract"}


def normalize_params(operation: str, given: dict) -> dict:
    schema = PARAMS[operation]
    unknown = set(given) - set(schema)
    if unknown:
        raise ConfigError("unknown parameter(s) for %s: %s"
                          % (operation, ", ".join(sorted(unknown))))
    out = {}
    for name, (conv, default) in schema.items():
        if name in given:
            val = given[name]
            try:
                out[name] = val if conv is list else conv(val)
            except (TypeError, ValueError) as exc:
                raise ConfigError("bad value for %s.%s: %r"
                                  % (operation, name, val)) from exc
        elif default is None:
            raise ConfigError("missing required parameter %s.%s"
                              % (operation, name))
        else:
            out[name] = default
    return out


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------

CONFIG_KEYS = {"carpet", "pipeline", "out", "seed", "cache", "threads"}


def load_config(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(data) - CONFIG_KEYS
    if unknown:
        raise ConfigError("unknown config key(s): %s" % ", ".join(sorted(unknown)))
    if "pipeline" not in data:
        raise ConfigError("config needs a pipeline list")
    return data


def run_pipeline(ctx: Context, stages: list) -> int:
    worst = EXIT_OK
    for entry in stages:
        if isinstance(entry, str):
            entry = {"stage": entry}
        entry = dict(entry)
        name = entry.pop("stage", None)
        if name is None:
            raise ConfigError("pipeline stage missing 'stage' key")
        name = STAGE_ALIASES.get(name, name)
        if name not in OPS:
            raise ConfigError("unknown stage %r" % name)
        params = normalize_params(name, entry)
        payload, path, hit = cached_run(ctx, name, params)
        status = ""
        if payload.get("passed") is False:
            status = "  [ASSERT FAILED]"
            worst = EXIT_ASSERTION
        print("%-24s %s%s%s" % (name, os.path.basename(path),
                                "  (cached)" if hit else "", status))
        if name == "validate" and not payload["passed"]:
            for ax in payload["axioms"]["axioms"]:
                if not ax["passed"]:
                    print("  axiom %s failed: %s" % (ax["axiom"], ax["witness"]))
            return EXIT_VALIDATION
    return worst


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


def _write_tsv(path: str, header: list, rows: list) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t")
        w.writerow(header)
        w.writerows(rows)


def report(result_dir: str, out_dir: str | None = None) -> int:
    out_dir = out_dir or result_dir
    os.makedirs(out_dir, exist_ok=True)
    envelopes = []
    corrupt = []
    if os.path.isdir(result_dir):
        for name in sorted(os.listdir(result_dir)):
            if not name.endswith(".json"):
                continue
            path = os.path.join(result_dir, name)
            try:
                env = read_envelope(path)
                if "operation" not in env or "payload" not in env:
                    raise KeyError("missing fields")
                envelopes.append(env)
            except (ValueError, KeyError) as exc:
                corrupt.append((name, str(exc)))
    lines = []
    rows = []
    by_spec: dict = {}
    for env in envelopes:
        by_spec.setdefault(env["spec_hash"], []).append(env)

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    figures = []
    for spec_hash in sorted(by_spec):
        lines.append("spec %s" % spec_hash)
        for env in sorted(by_spec[spec_hash], key=lambda e: (e["operation"], e["key"])):
            op = env["operation"]
            pay = env["payload"]
            summary = ""
            if op == "rho":
                summary = ("ratios=%s rho_hat=%.6g beta0=%.6g"
                           % (["%.5g" % r for r in pay["ratios"]],
                              pay["rho_hat"], pay["beta0"]))
                fig, axp = plt.subplots(figsize=(5, 3.5))
                axp.plot(range(len(pay["ratios"])), pay["ratios"], "o-")
                axp.axhline(pay["rho_hat"], ls="--", lw=0.8)
                axp.set_xlabel("level n")
                axp.set_ylabel("R(n+1)/R(n)")
                axp.set_title("resistance ratios")
                fname = "fig_rho_%s.png" % env["key"][:12]
                fig.tight_layout()
                fig.savefig(os.path.join(out_dir, fname), dpi=110)
                plt.close(fig)
                figures.append(fname)
            elif op == "gamma":
                summary = "gamma=%s" % (["%.5g" % g for g in pay["gamma"]],)
            elif op == "timescale":
                summary = ("k=%d H=%s" % (pay["k"],
                           ["%.4g" % h for h in pay["grid_h"]]))
                fig, axp = plt.subplots(figsize=(5, 3.5))
                axp.loglog(pay["grid_r"], pay["grid_h"], "o-")
                axp.set_xlabel("r")
                axp.set_ylabel("H(r)")
                axp.set_title("time-scale function")
                fname = "fig_timescale_%s.png" % env["key"][:12]
                fig.tight_layout()
                fig.savefig(os.path.join(out_dir, fname), dpi=110)
                plt.close(fig)
                figures.append(fname)
            elif op == "walk-heatkernel":
                summary = ("mode=%s ds_hat=%.4g ds_ref=%.4g"
                           % (pay["mode"], pay["ds_hat"], pay["ds_reference"]))
                fig, axp = plt.subplots(figsize=(5, 3.5))
                axp.loglog(pay["times"], pay["rho_diag"], ".", ms=3)
                axp.set_xlabel("t")
                axp.set_ylabel("p_t(x,x)/pi(x)")
                axp.set_title("on-diagonal decay (d_s ~ %.3f)" % pay["ds_hat"])
                fname = "fig_heatkernel_%s.png" % env["key"][:12]
                fig.tight_layout()
                fig.savefig(os.path.join(out_dir, fname), dpi=110)
                plt.close(fig)
                figures.append(fname)
                _write_tsv(os.path.join(out_dir,
                                        "heatkernel_%s.tsv" % env["key"][:12]),
                           ["t", "rho_diag"],
                           list(zip(pay["times"], pay["rho_diag"])))
            elif op == "form-hilbert":
                summary = "h(bb,kz)=%.6g sup=%.6g inf=%.6g" % (
                    pay["h"], pay["sup"], pay["inf"])
            elif op == "form-contract":
                hs = [r["h"] for r in pay["table"]]
                summary = "h per iteration=%s monotone=%s" % (hs, pay["monotone"])
            elif op == "walk-exit":
                summary = "ratios=%s" % (["%.5g" % r["ratio"]
                                          for r in pay["ratios"]],)
            elif op == "validate":
                summary = "passed=%s" % pay["passed"]
            elif "passed" in pay:
                summary = "passed=%s" % pay["passed"]
            lines.append("  %-24s %s" % (op, summary))
            rows.append([spec_hash[:12], op, env["key"][:12],
                         pay.get("passed", ""), summary])
    for name, err in corrupt:
        lines.append("corrupt envelope %s: %s" % (name, err))
    text = "\n".join(lines) + ("\n" if lines else "")
    _atomic_write(os.path.join(out_dir, "summary.txt"), text)
    _write_tsv(os.path.join(out_dir, "summary.tsv"),
               ["spec", "operation", "key", "passed", "summary"], rows)
    sys.stdout.write(text)
    if figures:
        print("figures: " + ", ".join(figures))
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _spec_from_args(args) -> CarpetSpec:
    if args.spec:
        return geometry.load_spec(args.spec)
    return geometry.PRESETS[args.preset]


def _add_common(sub):
    sub.add_argument("--level", type=int, default=None)
    return sub


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="carpetlab",
                                description=__doc__.split("\n")[0])
    p.add_argument("--spec", help="JSON carpet spec file")
    p.add_argument("--preset", default="sc2",
                   choices=sorted(geometry.PRESETS))
    p.add_argument("--out", default="results")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--cache", choices=["on", "off"], default="on")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("validate").add_argument("--max-block-scale", type=int,
                                            default=2)
    s = sub.add_parser("cells")
    s.add_argument("--level", type=int, default=1)
    s = sub.add_parser("resist")
    s.add_argument("--model", choices=["crosswire", "cell"],
                   default="crosswire")
    s.add_argument("--level", type=int, default=1)
    s = sub.add_parser("rho")
    s.add_argument("--n-max", type=int, default=4)
    s = sub.add_parser("gamma")
    s.add_argument("--n-max", type=int, default=4)
    s.add_argument("--model", choices=["crosswire", "cell"],
                   default="crosswire")
    s = sub.add_parser("timescale")
    s.add_argument("--n-max", type=int, default=4)
    s = sub.add_parser("res-annulus")
    s.add_argument("--level", type=int, default=3)
    s.add_argument("--center", default="0.5,0.17")
    s.add_argument("--radius", type=float, default=0.1)
    s.add_argument("--n-max", type=int, default=4)

    f = sub.add_parser("form")
    fsub = f.add_subparsers(dest="form_command", required=True)
    s = fsub.add_parser("build")
    s.add_argument("--family", choices=["bb", "kz"], default="bb")
    s.add_argument("--level", type=int, default=2)
    s = fsub.add_parser("check-invariance")
    s.add_argument("--family", choices=["bb", "kz"], default="bb")
    s.add_argument("--level", type=int, default=2)
    s.add_argument("--fold-level", type=int, default=1)
    s = fsub.add_parser("hilbert")
    s.add_argument("--level", type=int, default=2)
    s = fsub.add_parser("combine")
    s.add_argument("--level", type=int, default=2)
    s.add_argument("--delta", type=float, default=0.01)
    s = fsub.add_parser("besov")
    s.add_argument("--level", type=int, default=3)
    s.add_argument("--samples", type=int, default=100)
    s = fsub.add_parser("contract")
    s.add_argument("--level", type=int, default=3)
    s.add_argument("--iterations", type=int, default=2)

    w = sub.add_parser("walk")
    wsub = w.add_subparsers(dest="walk_command", required=True)
    s = wsub.add_parser("exit")
    s.add_argument("--n-max", type=int, default=4)
    s = wsub.add_parser("move")
    s.add_argument("--level", type=int, default=1)
    s.add_argument("--move-type", choices=["corner", "slide", "any"],
                   default="corner")
    s.add_argument("--edge-index", type=int, default=-1)
    s.add_argument("--samples", type=int, default=100000)
    s.add_argument("--depth", type=int, default=2)
    s = wsub.add_parser("couple")
    s.add_argument("--level", type=int, default=3)
    s.add_argument("--resolution", type=int, default=3)
    s.add_argument("--x", required=True, help="comma-separated lattice coords")
    s.add_argument("--y", required=True)
    s.add_argument("-m", "--m", type=int, default=1)
    s.add_argument("--radius", type=float, default=0.4)
    s.add_argument("--samples", type=int, default=20000)
    s = wsub.add_parser("harnack")
    s.add_argument("--level", type=int, default=3)
    s.add_argument("--center", default="0.5,0.17")
    s.add_argument("--radius", type=float, default=0.25)
    s = wsub.add_parser("heatkernel")
    s.add_argument("--level", type=int, default=3)
    s.add_argument("--mode", choices=["matrix-power", "monte-carlo"],
                   default="matrix-power")
    s.add_argument("--samples", type=int, default=50000)

    s = sub.add_parser("pipeline")
    s.add_argument("--config", help="JSON config file")
    s.add_argument("--stages", help="comma-separated stage names")

    s = sub.add_parser("report")
    s.add_argument("--dir", default=None,
                   help="envelope directory (defaults to --out)")
    return p


def _parse_floats(text: str) -> list:
    return [float(x) for x in text.split(",")]


def _parse_ints(text: str) -> list:
    return [int(x) for x in text.split(",")]


def _direct_op(args) -> tuple:
    """Map parsed CLI args for a single operation to (op name, params)."""
    c = args.command
    if c == "validate":
        return "validate", {"max_block_scale": args.max_block_scale}
    if c == "cells":
        return "cells", {"level": args.level}
    if c == "resist":
        return "resist", {"model": args.model, "level": args.level}
    if c == "rho":
        return "rho", {"n_max": args.n_max}
    if c == "gamma":
        return "gamma", {"n_max": args.n_max, "model": args.model}
    if c == "timescale":
        return "timescale", {"n_max": args.n_max}
    if c == "res-annulus":
        return "res-annulus", {"level": args.level,
                               "center": _parse_floats(args.center),
                               "radius": args.radius, "n_max": args.n_max}
    if c == "form":
        fc = args.form_command
        if fc == "build":
            return "form-build", {"family": args.family, "level": args.level}
        if fc == "check-invariance":
            return "form-check-invariance", {"family": args.family,
                                             "level": args.level,
                                             "fold_level": args.fold_level}
        if fc == "hilbert":
            return "form-hilbert", {"level": args.level}
        if fc == "combine":
            return "form-combine", {"level": args.level, "delta": args.delta}
        if fc == "besov":
            return "form-besov", {"level": args.level, "samples": args.samples}
        if fc == "contract":
            return "form-contract", {"level": args.level,
                                     "iterations": args.iterations}
    if c == "walk":
        wc = args.walk_command
        if wc == "exit":
            return "walk-exit", {"n_max": args.n_max}
        if wc == "move":
            return "walk-move", {"level": args.level,
                                 "move_type": args.move_type,
                                 "edge_index": args.edge_index,
                                 "samples": args.samples,
                                 "depth": args.depth}
        if wc == "couple":
            return "walk-couple", {"level": args.level,
                                   "resolution": args.resolution,
                                   "x": _parse_ints(args.x),
                                   "y": _parse_ints(args.y),
                                   "m": args.m, "radius": args.radius,
                                   "samples": args.samples}
        if wc == "harnack":
            return "walk-harnack", {"level": args.level,
                                    "center": _parse_floats(args.center),
                                    "radius": args.radius}
        if wc == "heatkernel":
            return "walk-heatkernel", {"level": args.level,
                                       "mode": args.mode,
                                       "samples": args.samples}
    raise ConfigError("unhandled command %r" % c)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "report":
            return report(args.dir or args.out, args.out)

        spec = _spec_from_args(args)
        ctx = Context(spec, args.out, args.seed, args.cache == "on",
                      args.threads)

        if args.command == "pipeline":
            if args.config:
                cfg = load_config(args.config)
                if "carpet" in cfg:
                    carpet = cfg["carpet"]
                    spec = (geometry.PRESETS[carpet] if isinstance(carpet, str)
                            else geometry.spec_from_dict(carpet))
                ctx = Context(spec,
                              cfg.get("out", args.out),
                              int(cfg.get("seed", args.seed)),
                              cfg.get("cache", args.cache) == "on",
                              int(cfg.get("threads", args.threads)))
                stages = cfg["pipeline"]
            elif args.stages:
                stages = [s.strip() for s in args.stages.split(",") if s.strip()]
            else:
                raise ConfigError("pipeline needs --config or --stages")
            return run_pipeline(ctx, stages)

        op, raw = _direct_op(args)
        params = normalize_params(op, raw)
        payload, path, hit = cached_run(ctx, op, params)
        print(json.dumps(payload, sort_keys=True, indent=1))
        print("envelope: %s%s" % (path, "  (cached)" if hit else ""))
        if op == "validate" and not payload["passed"]:
            return EXIT_VALIDATION
        if payload.get("passed") is False:
            return EXIT_ASSERTION
        return EXIT_OK
    except (ConfigError, StructuralError, json.JSONDecodeError) as exc:
        print("error: %s" % exc, file=sys.stderr)
        return EXIT_VALIDATION
    except (network.SolverError, network.DisconnectedError,
            geometry.ResourceError, forms.DependencyError) as exc:
        print("solver error: %s" % exc, file=sys.stderr)
        return EXIT_SOLVER
    except ValueError as exc:
        print("error: %s" % exc, file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
