"""Matplotlib renderings of the delimited report outputs.

Every CLI report path can also emit a figure file next to its CSV/JSONL
output; these helpers own the plotting so the rest of the package never
touches matplotlib.
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt


def training_curves(records: list[dict], path) -> None:
    """Four-panel summary of a training log (one record per epoch)."""
    epochs = [r["epoch"] for r in records]
    fig, axes = plt.subplots(2, 2, figsize=(9, 6), sharex=True)
    axes[0, 0].plot(epochs, [r["mse"] for r in records], color="tab:blue")
    axes[0, 0].set_ylabel("reconstruction MSE")
    axes[0, 1].plot(epochs, [r["mean_energy_prior"] for r in records], label="prior")
    axes[0, 1].plot(epochs, [r["mean_energy_posterior"] for r in records], label="posterior")
    axes[0, 1].set_ylabel("mean latent energy")
    axes[0, 1].legend(fontsize=8)
    axes[1, 0].plot(epochs, [r["grad_norm_theta"] for r in records], color="tab:green")
    axes[1, 0].set_ylabel("generator grad norm")
    axes[1, 0].set_xlabel("epoch")
    alpha = [(r["epoch"], r["grad_norm_alpha"]) for r in records if "grad_norm_alpha" in r]
    if alpha:
        axes[1, 1].plot(*zip(*alpha), color="tab:red")
        axes[1, 1].set_ylabel("prior grad norm")
    else:
        axes[1, 1].text(0.5, 0.5, "no prior updates", ha="center", va="center")
        axes[1, 1].set_axis_off()
    axes[1, 1].set_xlabel("epoch")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def energy_histogram(edges, counts, path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(edges[:-1], counts, width=[b - a for a, b in zip(edges[:-1], edges[1:])],
           align="edge", color="tab:purple", edgecolor="white")
    ax.set_xlabel("latent energy")
    ax.set_ylabel("count")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def eval_summary(rows: list[dict], aggregate: dict, path) -> None:
    """Aggregate metric bars plus the per-image MAE distribution."""
    fig, (left, right) = plt.subplots(1, 2, figsize=(9, 4))
    names = ["s_measure", "mean_f", "mean_e", "mae"]
    left.bar(names, [aggregate[n] for n in names], color="tab:blue")
    left.set_ylim(0, 1)
    left.set_ylabel("aggregate value")
    left.tick_params(axis="x", rotation=20)
    right.hist([r["mae"] for r in rows], bins=20, color="tab:orange")
    right.set_xlabel("per-image MAE")
    right.set_ylabel("images")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
