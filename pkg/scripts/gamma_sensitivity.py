"""Stage II with the Gruneisen field frozen at two different guesses on the point phantoms."""
import argparse

from qpatdot.config import PRESETS, preset
from qpatdot.pipeline import gamma_sensitivity_experiment


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--preset", choices=sorted(PRESETS), default="medium")
    p.add_argument("--out", default="runs/sensitivity")
    args = p.parse_args()
    rep = gamma_sensitivity_experiment(preset(args.preset, noise_level=0.0))
    rep.save(args.out)
    for k, v in rep.norms.items():
        print(f"{k:>20s} {v:.4e}")


if __name__ == "__main__":
    main()
