"""Command line: ``flowtoll {solve,oracle,deviate,check,generate}``.

Exit codes: 0 success, 2 invariant violation, 3 infeasible input,
4 resource cap.
"""
from __future__ import annotations

import argparse
import math
import sys
import time

import numpy as np

from .game_core import (InfeasibleFlowError, RoutingInstance, UnreachableDemandError, average_cost,
                        check_flow, marginal_tolls)
from .io import (InstanceError, RunConfig, default_seed, dump_result, format_instance,
                 generate_instance, load_instance, load_result, parse_instance)
from .mediator import (eta_eq_bound, eta_game_bound, eta_opt_bound, flowtoll, unsatisfied_count_bound)
from .oracles import (ResourceCapError, best_response_dynamics, brute_force_opt, canonical_menu,
                      count_unsatisfied, fractional_opt, measure_deviation_gain, verify_nash)
from .private_opt import rounding_gap_bound

EXIT_OK, EXIT_INVARIANT, EXIT_INFEASIBLE, EXIT_CAP = 0, 2, 3, 4


class InvariantViolation(RuntimeError):
    pass


def _paths(rows):
    return [None if r is None else [int(e) for e in np.flatnonzero(np.asarray(r) > 0.5)] for r in rows]


def run_solve(inst: RoutingInstance, cfg: RunConfig, opt: float | None = None, with_oracle: bool = True) -> dict:
    """Run the mediator on truthful reports and collect everything worth keeping."""
    eps = cfg.mediator_eps
    rng = np.random.default_rng(cfg.seed)
    out = flowtoll(inst, list(inst.demands), eps, cfg.delta, cfg.beta, rng, **cfg.mediator_kwargs())
    n, m, g = inst.n, inst.m, inst.gamma
    final = np.stack([s for s in out.suggestions if s is not None])
    res = {
        "command": "solve",
        "instance": format_instance(inst, opt),
        "config": cfg.to_dict(),
        "suggestions": _paths(out.suggestions),
        "tolls": out.tolls,
        "noisy_congestion": out.noisy_congestion,
        "rounded_paths": _paths(list(out.x_bullet)),
        "average_cost": average_cost(out.instance, final, check=False),
        "rounded_average_cost": average_cost(out.instance, out.x_bullet, check=False),
        "fractional_average_cost": average_cost(out.instance, out.pgd.x_bar, check=False),
        "diagnostics": out.diagnostics(),
    }
    bounds = {
        "rounding_gap_bound": rounding_gap_bound(m, g, n, cfg.beta),
        "zeta_hat": out.zeta,
    }
    if with_oracle and opt is None:
        try:
            _, opt = brute_force_opt(inst)
        except ResourceCapError:
            opt = None
    if opt is not None:
        alpha = max(res["rounded_average_cost"] - opt, 0.0)
        res["oracle_opt"] = opt
        res["gap"] = res["average_cost"] - opt
        res["realized_alpha"] = alpha
        bounds.update({
            "unsatisfied_count_bound": unsatisfied_count_bound(n, m, g, alpha),
            "eta_eq": eta_eq_bound(m, n, g, alpha, eps, cfg.beta),
            "eta_opt": eta_opt_bound(m, n, g, alpha),
            "eta_game": eta_game_bound(m, n, g, alpha, cfg.eps, cfg.beta, cfg.delta),
        })
        res["unsatisfied_count"] = count_unsatisfied(out.instance, out.x_bullet, out.noisy_congestion,
                                                     out.tolls, out.zeta)
    res["bounds"] = bounds
    return res


def run_oracle(inst: RoutingInstance) -> dict:
    x, opt = brute_force_opt(inst)
    y = x.sum(axis=0)
    ok, who, gain = verify_nash(inst, x, eta=1e-9, functional=True)
    nash, steps = best_response_dynamics(inst, x)
    res = {
        "command": "oracle",
        "instance": format_instance(inst, opt),
        "opt": opt,
        "opt_paths": _paths(list(x)),
        "opt_is_nash_under_marginal_tolls": ok,
        "worst_gain_under_marginal_tolls": gain,
        "marginal_tolls_at_opt": marginal_tolls(inst, y),
        "untolled_nash_paths": _paths(list(nash)),
        "untolled_nash_cost": average_cost(inst, nash),
        "best_response_steps": steps,
    }
    res["fractional_opt"] = fractional_opt(inst)
    return res


def run_deviate(inst: RoutingInstance, cfg: RunConfig, player: int) -> dict:
    if not 0 <= player < inst.n:
        raise IndexError(f"player {player} out of range")
    _, opt = brute_force_opt(inst)
    cache = {}
    rows = []
    alpha = 0.0
    for prof in canonical_menu(inst, player):
        r = measure_deviation_gain(inst, prof, cfg.trials, cfg.seed, cfg.mediator_eps, cfg.delta, cfg.beta,
                                   opt=opt, cache=cache, **cfg.mediator_kwargs())
        alpha = max(alpha, r.realized_alpha)
        rows.append({"deviation": prof.label, "gain": r.gain, "ci95": r.half_width,
                     "truthful_cost": r.good_cost, "deviation_cost": r.deviation_cost})
    eta = eta_game_bound(inst.m, inst.n, inst.gamma, alpha, cfg.eps, cfg.beta, cfg.delta)
    return {"command": "deviate", "instance": format_instance(inst, opt), "config": cfg.to_dict(),
            "player": player, "realized_alpha": alpha, "eta_game": eta, "deviations": rows,
            "max_gain": max(r["gain"] for r in rows)}


def check_result(doc: dict) -> list:
    """Re-verify a solve result; returns a list of violation messages."""
    bad = []
    inst = parse_instance(doc["instance"])
    n, m = inst.n, inst.m
    cap = inst.toll_cap
    tolls = np.asarray(doc["tolls"], dtype=float)
    y_hat = np.asarray(doc["noisy_congestion"], dtype=float)
    if tolls.shape != (m,) or y_hat.shape != (m,):
        return ["toll or congestion vector has the wrong length"]
    if np.any(tolls < -1e-9) or np.any(tolls > cap + 1e-9):
        bad.append(f"toll outside [0, n*gamma] = [0, {cap:.6g}]")
    if np.any(y_hat < -1e-9) or np.any(y_hat > n + 1e-9):
        bad.append("noisy congestion outside [0, n]")
    kept = doc["diagnostics"]["kept_reports"]
    if kept and np.max(np.abs(marginal_tolls(inst.with_demands([inst.demands[j] for j in kept]), y_hat) - tolls)) > 1e-9:
        bad.append("tolls are not the marginal-cost tolls of the released congestion")
    x = np.zeros((n, m))
    for i, p in enumerate(doc["suggestions"]):
        if p is None:
            continue
        x[i, p] = 1.0
    try:
        check_flow(inst, x, integral=True)
    except InfeasibleFlowError as err:
        bad.append(f"suggestion infeasible: {err}")
    led = doc["diagnostics"]["ledger"]
    eps_t = led["target"]["epsilon"]
    eps_t = math.inf if eps_t == "inf" else float(eps_t)
    delta = float(led["target"]["delta"])
    charges = {c["mechanism"]: c for c in led["charges"]}
    if set(charges) != {"p_gd", "p_con"} or len(led["charges"]) != 2:
        bad.append("ledger must hold exactly the p_gd and p_con charges")
    elif math.isfinite(eps_t):
        if not (math.isclose(charges["p_gd"]["epsilon"], eps_t / 4) and math.isclose(charges["p_gd"]["delta"], delta / 2)):
            bad.append("p_gd charge differs from (eps/4, delta/2)")
        if not (math.isclose(charges["p_con"]["epsilon"], eps_t / 4) and charges["p_con"]["delta"] == 0):
            bad.append("p_con charge differs from (eps/4, 0)")
    if "average_cost" in doc and not bad:
        if abs(average_cost(inst, x) - doc["average_cost"]) > 1e-9:
            bad.append("recorded average cost does not match the suggestions")
    return bad


def _summary(res: dict, seconds: float) -> str:
    keys = ["average_cost", "oracle_opt", "gap", "realized_alpha", "unsatisfied_count",
            "opt", "fractional_opt", "opt_is_nash_under_marginal_tolls", "eta_game", "max_gain"]
    lines = [f"{k:<36} {res[k]}" for k in keys if k in res]
    if "bounds" in res:
        lines += [f"{k:<36} {v}" for k, v in sorted(res["bounds"].items())]
    if "deviations" in res:
        lines.append(f"{'deviation':<28} {'gain':>12} {'ci95':>10}")
        lines += [f"{r['deviation']:<28} {r['gain']:>12.6g} {r['ci95']:>10.3g}" for r in res["deviations"]]
    if "diagnostics" in res and "mode" in res["diagnostics"]:
        lines.append(res["diagnostics"]["mode"])
    lines.append(f"{'wall_clock_seconds':<36} {seconds:.3f}")
    return "\n".join(lines)


def _config(args) -> RunConfig:
    return RunConfig(eps=args.eps, delta=args.delta, beta=args.beta, noise_free=args.noise_free,
                     seed=args.seed, c_t=args.c_t, c_alpha=args.c_alpha,
                     flip_dual_sign=args.flip_dual_sign, rounds=args.rounds,
                     trials=getattr(args, "trials", 10000), output=args.output)


def _write(res: dict, path: str | None):
    text = dump_result(res)
    if path:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    return text


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flowtoll", description="Private tolling mediator for routing games.")
    sub = p.add_subparsers(dest="command", required=True)

    def run_opts(sp):
        sp.add_argument("instance", help="instance file or built-in name such as pigou2")
        sp.add_argument("--eps", type=float, default=1.0)
        sp.add_argument("--delta", type=float, default=1e-3)
        sp.add_argument("--beta", type=float, default=0.05)
        sp.add_argument("--noise-free", action="store_true", help="exact, non-private diagnostic mode")
        sp.add_argument("--seed", type=int, default=default_seed(), help="default: $FLOWTOLL_SEED or 0")
        sp.add_argument("--c-t", type=float, default=1.0, help="constant in the iteration count")
        sp.add_argument("--c-alpha", type=float, default=1.0, help="constant in the accuracy estimate")
        sp.add_argument("--rounds", type=int, default=None, help="override the iteration count")
        sp.add_argument("--flip-dual-sign", action="store_true")
        sp.add_argument("-o", "--output", default=None, help="write the JSON result here")

    sp = sub.add_parser("solve", help="run the mediator end to end")
    run_opts(sp)
    sp.add_argument("--no-oracle", action="store_true", help="skip the brute-force comparison")
    sp = sub.add_parser("oracle", help="exact optimum and Nash checks")
    sp.add_argument("instance")
    sp.add_argument("-o", "--output", default=None)
    sp = sub.add_parser("deviate", help="measure deviation gains for one player")
    run_opts(sp)
    sp.add_argument("--player", type=int, default=0)
    sp.add_argument("--menu", choices=["canonical"], default="canonical")
    sp.add_argument("--trials", type=int, default=10000)
    sp = sub.add_parser("check", help="re-verify a solve result file")
    sp.add_argument("result")
    sp = sub.add_parser("generate", help="write a random instance")
    sp.add_argument("kind", choices=["parallel-links", "grid", "layered-DAG"])
    sp.add_argument("--n", type=int, default=3)
    sp.add_argument("--m", type=int, default=4)
    sp.add_argument("--family", default="affine", choices=["affine", "monomial", "mixed", "pigou"])
    sp.add_argument("--seed", type=int, default=default_seed())
    sp.add_argument("-o", "--output", default=None)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    t0 = time.perf_counter()
    try:
        if args.command == "generate":
            inst = generate_instance(args.kind, args.n, args.m, args.family, args.seed)
            text = format_instance(inst)
            if args.output:
                with open(args.output, "w", encoding="utf-8") as fh:
                    fh.write(text)
            else:
                sys.stdout.write(text)
            for w in inst.boundedness_violations():
                print(f"warning: edge {w} has latency above n at y = n", file=sys.stderr)
            return EXIT_OK
        if args.command == "check":
            with open(args.result, encoding="utf-8") as fh:
                doc = load_result(fh.read())
            bad = check_result(doc)
            for b in bad:
                print(f"violation: {b}")
            print("ok" if not bad else f"{len(bad)} violation(s)")
            return EXIT_INVARIANT if bad else EXIT_OK
        loaded = load_instance(args.instance)
        inst = loaded.instance
        if args.command == "solve":
            res = run_solve(inst, _config(args), loaded.opt, with_oracle=not args.no_oracle)
        elif args.command == "oracle":
            res = run_oracle(inst)
        else:
            res = run_deviate(inst, _config(args), args.player)
        _write(res, args.output)
        print(_summary(res, time.perf_counter() - t0))
        return EXIT_OK
    except ResourceCapError as err:
        print(f"resource cap: {err}", file=sys.stderr)
        return EXIT_CAP
    except (InstanceError, InfeasibleFlowError, UnreachableDemandError, FileNotFoundError,
            IndexError, KeyError) as err:
        print(f"infeasible input: {err}", file=sys.stderr)
        return EXIT_INFEASIBLE


if __name__ == "__main__":
    sys.exit(main())
