"""Plot a run directory written by `fmpc run`.

    python scripts/plot_run.py runs/paper_sec5 [-o figure.png]

Three panels: tracking error in psi0, error derivative in psi1, and input.
"""

import argparse
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import pandas as pd

STYLES = {"two_funnel": ("tab:blue", "two funnels"), "one_funnel": ("tab:orange", "one funnel")}


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("run", type=Path)
    parser.add_argument("-o", "--output", type=Path)
    args = parser.parse_args()

    runs = {s: pd.read_csv(args.run / f"{s}.csv") for s in STYLES if (args.run / f"{s}.csv").exists()}
    if not runs:
        parser.error(f"no scheme CSVs in {args.run}")

    fig, (ax_e, ax_ed, ax_u) = plt.subplots(3, 1, sharex=True, figsize=(8, 9))
    first = next(iter(runs.values()))
    for ax, col in ((ax_e, "psi0"), (ax_ed, "psi1")):
        ax.fill_between(first.t, -first[col], first[col], color="0.9", label=col)
        ax.plot(first.t, first[col], color="0.4", lw=0.8)
        ax.plot(first.t, -first[col], color="0.4", lw=0.8)

    for scheme, df in runs.items():
        color, label = STYLES[scheme]
        ax_e.plot(df.t, df.e, color=color, label=label)
        ax_ed.plot(df.t, df.edot, color=color, label=label)
        ax_u.step(df.t, df.u, where="post", color=color, label=label)

    ax_e.set_ylabel("e = y - y_ref")
    ax_ed.set_ylabel("de/dt")
    ax_u.set_ylabel("u")
    ax_u.set_xlabel("t (s)")
    for ax in (ax_e, ax_ed, ax_u):
        ax.grid(alpha=0.3)
        ax.legend(loc="upper right")
    ax_e.set_ylim(-3.3, 3.3)
    ax_ed.set_ylim(-6.3, 6.3)
    fig.tight_layout()

    out = args.output or args.run / "funnels.png"
    fig.savefig(out, dpi=150)
    print(out)


if __name__ == "__main__":
    main()
