"""Experiment runner: generate systems, verify exchangeability, decompose,
evaluate policies analytically, and train hierarchical controllers from a JSON
config, with CSV outputs and an optional SVG convergence plot.

Exit codes: 0 success, 1 verification failure, 2 invalid config or arguments,
3 training aborted on instability (history still written), 4 I/O failure.
"""

import argparse
import json
import os
import sys
import tempfile

import numpy as np

from . import decomp, matlin, npg, oracle, sysmodel
from .errors import DimensionError, HierLQRError

EXIT_OK = 0
EXIT_VERIFY_FAIL = 1
EXIT_CONFIG = 2
EXIT_INSTABILITY = 3
EXIT_IO = 4


class ConfigError(HierLQRError):
    pass


def _atomic_write(path, text):
    """Write via a temp file in the target directory, then rename."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp_", suffix="~")
    try:
        with os.fdopen(fd, "w") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _check_keys(obj, allowed, where):
    unknown = set(obj) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")


def _load_json(path):
    with open(path) as f:
        return json.load(f)


def _partition_from_args(args):
    return sysmodel.SubpopulationPartition(
        sizes=args.sizes, state_dims=args.state_dims, action_dims=args.action_dims
    )


def cmd_generate(args):
    p = _partition_from_args(args)
    system = sysmodel.generate_system(p, seed=args.seed)
    report = sysmodel.verify_partial_exchangeability(system)
    if not report.holds:
        print(json.dumps(report.to_dict()), file=sys.stderr)
        return EXIT_VERIFY_FAIL
    _atomic_write(args.out, sysmodel.system_to_json(system) + "\n")
    print(json.dumps({"written": args.out, "states": p.total_state_dim, "actions": p.total_action_dim}))
    return EXIT_OK


def cmd_verify(args):
    system = sysmodel.system_from_json(open(args.system).read())
    report = sysmodel.verify_partial_exchangeability(system, tol=args.tol)
    print(json.dumps(report.to_dict(), indent=2))
    return EXIT_OK if report.holds else EXIT_VERIFY_FAIL


def cmd_decompose(args):
    system = sysmodel.system_from_json(open(args.system).read())
    ensemble = decomp.build_auxiliary(system)
    text = decomp.ensemble_to_json(ensemble)
    if args.out:
        _atomic_write(args.out, text + "\n")
        print(json.dumps({"written": args.out}))
    else:
        print(text)
    return EXIT_OK


def _instance_from_json(obj):
    _check_keys(obj, ("A", "B", "Q", "R", "Phi"), "instance")
    return oracle.LQRInstance(
        A=sysmodel._mat_from_json(obj["A"]),
        B=sysmodel._mat_from_json(obj["B"]),
        Q=sysmodel._mat_from_json(obj["Q"]),
        R=sysmodel._mat_from_json(obj["R"]),
        Phi=sysmodel._mat_from_json(obj["Phi"]),
    )


def cmd_eval(args):
    inst = _instance_from_json(_load_json(args.instance))
    if args.optimal:
        _, K = oracle.optimal_policy(inst)
    elif args.gain:
        K = sysmodel._mat_from_json(_load_json(args.gain))
    else:
        raise ConfigError("eval needs --gain PATH or --optimal")
    analysis = oracle.analyze_policy(inst, oracle.LinearGaussianPolicy(K, args.sigma))
    out = {
        "cost": analysis.cost,
        "rho": matlin.spectral_radius(inst.A - inst.B @ K),
        "E_norm": float(np.linalg.norm(analysis.E_K, "fro")),
        "grad_norm": float(np.linalg.norm(analysis.grad, "fro")),
        "K": sysmodel._mat_to_json(K),
    }
    print(json.dumps(out, indent=2))
    return EXIT_OK


_TRAIN_KEYS = (
    "N_outer",
    "T_inner",
    "mode",
    "seed",
    "eta_override",
    "sigma_explore",
    "cost0_estimator",
)
_GTD_KEYS = ("alpha", "xi2_constant")


def _resolve_system(cfg, base_dir):
    _check_keys(cfg, ("path", "inline", "generate"), "config.system")
    if sum(k in cfg for k in ("path", "inline", "generate")) != 1:
        raise ConfigError("config.system needs exactly one of path, inline, generate")
    if "path" in cfg:
        path = cfg["path"]
        if not os.path.isabs(path):
            path = os.path.join(base_dir, path)
        return sysmodel.system_from_json(open(path).read())
    if "inline" in cfg:
        return sysmodel.system_from_dict(cfg["inline"])
    gen = cfg["generate"]
    _check_keys(gen, ("sizes", "state_dims", "action_dims", "seed"), "config.system.generate")
    p = sysmodel.SubpopulationPartition(
        sizes=gen["sizes"], state_dims=gen["state_dims"], action_dims=gen["action_dims"]
    )
    return sysmodel.generate_system(p, seed=int(gen.get("seed", 0)))


def _default_k0(ensemble):
    p = ensemble.partition
    gains = [np.zeros((p.action_dims[l], p.state_dims[l])) for l in range(p.L)]
    K_bar = np.zeros((sum(p.action_dims), sum(p.state_dims)))
    return gains + [K_bar]


def _k0_from_config(cfg, ensemble):
    _check_keys(cfg, ("gains", "K_bar"), "config.K0")
    p = ensemble.partition
    if len(cfg["gains"]) != p.L:
        raise ConfigError("config.K0.gains must have one entry per subpopulation")
    gains = [sysmodel._mat_from_json(g) for g in cfg["gains"]]
    return gains + [sysmodel._mat_from_json(cfg["K_bar"])]


def _svg_gap_plot(gaps):
    """Self-contained line plot of the optimality gap per iteration on a
    log-scale y axis. Purely textual and deterministic."""
    w, h, m = 640, 400, 50
    ys = [max(g, 1e-300) for g in gaps]
    lo = min(np.log10(min(ys)), -0.5)
    hi = max(np.log10(max(ys)), lo + 1e-9) + 0.2
    lo -= 0.2
    n = len(gaps)

    def px(i):
        return m + (w - 2 * m) * (i / max(n - 1, 1))

    def py(v):
        return h - m - (h - m * 2) * ((np.log10(max(v, 1e-300)) - lo) / (hi - lo))

    pts = " ".join(f"{px(i):.2f},{py(v):.2f}" for i, v in enumerate(ys))
    ticks = []
    for e in range(int(np.floor(lo)), int(np.ceil(hi)) + 1):
        y = py(10.0**e)
        if m <= y <= h - m:
            ticks.append(
                f'<line x1="{m}" y1="{y:.2f}" x2="{w - m}" y2="{y:.2f}" '
                f'stroke="#ddd" stroke-width="1"/>'
                f'<text x="{m - 8}" y="{y + 4:.2f}" font-size="11" text-anchor="end" '
                f'font-family="monospace">1e{e}</text>'
            )
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" '
        f'viewBox="0 0 {w} {h}">\n'
        f'<rect width="{w}" height="{h}" fill="white"/>\n' + "\n".join(ticks) + "\n"
        f'<rect x="{m}" y="{m}" width="{w - 2 * m}" height="{h - 2 * m}" fill="none" '
        f'stroke="black" stroke-width="1"/>\n'
        f'<polyline points="{pts}" fill="none" stroke="#1f77b4" stroke-width="1.5"/>\n'
        f'<text x="{w / 2:.0f}" y="{h - 12}" font-size="12" text-anchor="middle" '
        f'font-family="monospace">iteration</text>\n'
        f'<text x="14" y="{h / 2:.0f}" font-size="12" text-anchor="middle" '
        f'font-family="monospace" transform="rotate(-90 14 {h / 2:.0f})">gap</text>\n'
        "</svg>\n"
    )


def cmd_train(args):
    cfg = _load_json(args.config)
    _check_keys(cfg, ("system", "train", "gtd", "out_dir", "emit_plot", "K0"), "config")
    if "system" not in cfg or "train" not in cfg:
        raise ConfigError("config needs 'system' and 'train' sections")
    _check_keys(cfg["train"], _TRAIN_KEYS, "config.train")
    _check_keys(cfg.get("gtd", {}), _GTD_KEYS, "config.gtd")

    base_dir = os.path.dirname(os.path.abspath(args.config))
    system = _resolve_system(cfg["system"], base_dir)
    ensemble = decomp.build_auxiliary(system)

    kwargs = dict(cfg["train"])
    kwargs.update(cfg.get("gtd", {}))
    if args.seed is not None:
        kwargs["seed"] = args.seed
    if args.mode is not None:
        kwargs["mode"] = {"oracle": "oracle_gradient", "model_free": "model_free"}[args.mode]
    tc = npg.TrainConfig(**kwargs)

    K0_list = _k0_from_config(cfg["K0"], ensemble) if "K0" in cfg else _default_k0(ensemble)
    out_dir = args.out or cfg.get("out_dir")
    if not out_dir:
        raise ConfigError("no output directory: set config.out_dir or pass --out")
    emit_plot = args.emit_plot or bool(cfg.get("emit_plot", False))

    hist = npg.train_hierarchical(system, ensemble, K0_list, tc)

    _atomic_write(os.path.join(out_dir, "system.json"), sysmodel.system_to_json(system) + "\n")
    _atomic_write(os.path.join(out_dir, "train.csv"), npg.history_to_csv(hist, deterministic=True))
    _atomic_write(os.path.join(out_dir, "summary.json"), npg.history_summary_json(hist) + "\n")
    if emit_plot:
        _atomic_write(os.path.join(out_dir, "gap.svg"), _svg_gap_plot(hist.total_gaps))
    print(json.dumps({"out_dir": out_dir, "aborted": hist.aborted,
                      "total_gap_final": hist.total_gaps[-1]}))
    return EXIT_INSTABILITY if hist.aborted else EXIT_OK


def _int_list(text):
    return [int(x) for x in text.split(",") if x]


def build_parser():
    ap = argparse.ArgumentParser(prog="hierlqr", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="generate a partially exchangeable system")
    g.add_argument("--sizes", type=_int_list, required=True)
    g.add_argument("--state-dims", type=_int_list, required=True)
    g.add_argument("--action-dims", type=_int_list, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    v = sub.add_parser("verify", help="check partial exchangeability of a system file")
    v.add_argument("--system", required=True)
    v.add_argument("--tol", type=float, default=1e-9)
    v.set_defaults(func=cmd_verify)

    d = sub.add_parser("decompose", help="emit the auxiliary systems of a system file")
    d.add_argument("--system", required=True)
    d.add_argument("--out")
    d.set_defaults(func=cmd_decompose)

    e = sub.add_parser("eval", help="analytic evaluation of a gain on an instance")
    e.add_argument("--instance", required=True)
    e.add_argument("--gain")
    e.add_argument("--optimal", action="store_true")
    e.add_argument("--sigma", type=float, default=0.0)
    e.set_defaults(func=cmd_eval)

    t = sub.add_parser("train", help="run hierarchical training from a JSON config")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--out")
    t.add_argument("--mode", choices=("oracle", "model_free"))
    t.add_argument("--emit-plot", action="store_true")
    t.set_defaults(func=cmd_train)
    return ap


def main(argv=None):
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except (ConfigError, DimensionError, json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO
    except HierLQRError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VERIFY_FAIL


def entry():  # console-script entry point
    sys.exit(main())


if __name__ == "__main__":
    sys.exit(main())
