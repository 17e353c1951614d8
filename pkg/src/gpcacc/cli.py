"""Command-line entry point: ``gpcacc run --config scenario.yaml --out results/``."""
from __future__ import annotations

import argparse
import logging
import sys

from .sim import ConfigError, ScenarioConfig, run


def _parser():
    ap = argparse.ArgumentParser(prog="gpcacc", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="simulate one scenario")
    r.add_argument("--config", required=True, help="YAML file mirroring ScenarioConfig fields")
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--seed", type=int)
    r.add_argument("--policy", choices=["dhmpc", "dhsmpc", "dh-dhsmpc"])
    r.add_argument("--tau", type=float, help="time headway for every vehicle")
    r.add_argument("--tc", type=float, help="broadcast period in seconds")
    r.add_argument("--loss", type=float, help="packet loss probability (1 - p_success)")
    r.add_argument("--halt-on-collision", action="store_true")
    r.add_argument("-v", "--verbose", action="store_true")
    return ap


def load_config(args) -> ScenarioConfig:
    base = ScenarioConfig.load(args.config)
    data = base.to_dict()
    if args.seed is not None:
        data["seed"] = args.seed
    if args.policy:
        data["policy"] = args.policy
    if args.tau is not None:
        data["vehicle"]["tau"] = args.tau
        if data.get("vehicles"):
            data["vehicles"] = [dict(v or {}, tau=args.tau) for v in data["vehicles"]]
    if args.tc is not None:
        data["channel"]["t_c"] = args.tc
    if args.loss is not None:
        data["channel"]["p_success"] = 1.0 - args.loss
    if args.halt_on_collision:
        data["halt_on_collision"] = True
    return ScenarioConfig.from_dict(data)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = load_config(args)
        result = run(config)
        result.write(args.out)
    except (ConfigError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    m = result.metrics
    print(f"steps={m.steps} collision={m.collision} min_gap={m.min_gap:.3f} "
          f"emergency={m.emergency_activations} safety_events={m.safety_events}")
    return 2 if m.collision else 0


if __name__ == "__main__":
    sys.exit(main())
