"""Matplotlib figures written next to the CSV reports (training curves, loss panels, PCA, slices)."""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_STYLE = {
    "figure.dpi": 110,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "legend.frameon": False,
}

VARIANT_COLORS = {
    "baseline": "0.35",
    "vanilla": "tab:red",
    "relativistic": "tab:orange",
    "wasserstein": "tab:blue",
}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def _series(records, split, attr):
    rows = [r for r in records if r.split == split]
    x = [r.epoch for r in rows]
    y = [getattr(r, attr) if attr == "mre" else getattr(r.losses, attr) for r in rows]
    return np.array(x), np.array(y, dtype=float)


def plot_training_curves(runs, path, title="Training and validation MRE"):
    """MRE per epoch for one or more runs; ``runs`` maps label -> TrainRun."""
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(6, 3.5))
        stage_end = None
        for label, run in runs.items():
            color = VARIANT_COLORS.get(label.split()[0], None)
            for split, ls in (("train", "--"), ("val", "-")):
                x, y = _series(run.records, split, "mre")
                if len(x):
                    ax.plot(x, y, ls, color=color, lw=1.2, label=f"{label} ({split})")
            s1 = [r.epoch for r in run.records if r.stage == 1]
            if s1:
                stage_end = max(s1)
        if stage_end is not None:
            ax.axvline(stage_end + 0.5, color="k", lw=0.8, alpha=0.5)
        ax.set_xlabel("epoch")
        ax.set_ylabel("MRE [%]")
        ax.set_title(title)
        ax.legend(fontsize=7, ncol=2)
        return _save(fig, path)


def plot_loss_panels(runs, path):
    """Generator adversarial, discriminator and total generator loss per run (stage 2 only)."""
    panels = (("adv_g", "generator adversarial"), ("adv_d", "discriminator"), ("total_g", "total generator"))
    with plt.rc_context(_STYLE):
        fig, axes = plt.subplots(1, 3, figsize=(10, 3.2))
        for label, run in runs.items():
            color = VARIANT_COLORS.get(label.split()[0], None)
            recs = [r for r in run.records if r.stage == 2]
            for ax, (attr, _) in zip(axes, panels):
                x, y = _series(recs, "train", attr)
                if len(x):
                    ax.plot(x, y, color=color, lw=1.0, label=label)
        for ax, (_, name) in zip(axes, panels):
            ax.set_title(name)
            ax.set_xlabel("epoch")
        axes[0].legend(fontsize=6)
        return _save(fig, path)


def plot_stability_summary(rows, path):
    """Final validation MRE against adversarial weight, one line per variant."""
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        base = [r for r in rows if r["variant"] == "baseline"]
        if base:
            ax.axhline(base[0]["final_val_mre"], color=VARIANT_COLORS["baseline"], ls=":", label="lambda_G = 0")
        for variant in sorted({r["variant"] for r in rows} - {"baseline"}):
            pts = sorted((r["lambda_g"], r["final_val_mre"]) for r in rows if r["variant"] == variant)
            ax.plot(*zip(*pts), "o-", color=VARIANT_COLORS.get(variant), label=variant)
        ax.set_xscale("log")
        ax.set_xlabel("adversarial weight lambda_G")
        ax.set_ylabel("final validation MRE [%]")
        ax.legend(fontsize=7)
        return _save(fig, path)


def plot_pca(groups, path, fractions=None):
    """Scatter of the first two principal components; ``groups`` maps label -> (n, 2) array."""
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 4))
        for label, pts in groups.items():
            pts = np.asarray(pts)
            ax.scatter(pts[:, 0], pts[:, 1], s=6, alpha=0.6, label=label)
        if fractions is not None:
            ax.set_xlabel(f"PC1 ({100 * fractions[0]:.1f}%)")
            ax.set_ylabel(f"PC2 ({100 * fractions[1]:.1f}%)")
        else:
            ax.set_xlabel("PC1")
            ax.set_ylabel("PC2")
        ax.legend(fontsize=7, markerscale=2)
        return _save(fig, path)


def plot_slice(image, path, title="", cmap="viridis", label=""):
    with plt.rc_context(_STYLE | {"axes.grid": False}):
        fig, ax = plt.subplots(figsize=(4, 3.6))
        im = ax.imshow(image, origin="lower", cmap=cmap, interpolation="nearest")
        fig.colorbar(im, ax=ax, label=label)
        ax.set_title(title)
        ax.set_xticks([])
        ax.set_yticks([])
        return _save(fig, path)
