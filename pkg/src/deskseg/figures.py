"""Matplotlib figure rendering for the report paths.

Every command that emits a JSON/CSV report also renders a PNG next to it.
Imports are kept inside functions so library use stays matplotlib-free.
"""

from __future__ import annotations

from pathlib import Path


def _plt():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def save_loss_curves(log: list, path):
    plt = _plt()
    epochs = [r["epoch"] for r in log]
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    for key, label in (("l_cls", "classification"), ("l_reg", "box regression"),
                       ("l_seg", "segmentation"), ("total", "total")):
        axes[0].plot(epochs, [r[key] for r in log], label=label)
    axes[0].set_xlabel("epoch")
    axes[0].set_ylabel("loss")
    axes[0].set_yscale("log")
    axes[0].legend(fontsize=8)
    axes[0].set_title("training losses")
    val_pts = [(r["epoch"], r["val_AP"], r["val_AP50"], r["val_AP25"])
               for r in log if r.get("val_AP") is not None]
    if val_pts:
        ve, ap, ap50, ap25 = zip(*val_pts)
        axes[1].plot(ve, ap, marker="o", label="AP")
        axes[1].plot(ve, ap50, marker="s", label="AP50")
        axes[1].plot(ve, ap25, marker="^", label="AP25")
        axes[1].set_ylim(0, 1.02)
        axes[1].legend(fontsize=8)
    axes[1].set_xlabel("epoch")
    axes[1].set_ylabel("validation AP")
    axes[1].set_title("validation metrics")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_eval_figure(report, class_names: list, path):
    plt = _plt()
    fig, ax = plt.subplots(figsize=(7, 4))
    classes = sorted(report.per_class_ap)
    labels = [class_names[c] if c < len(class_names) else str(c) for c in classes]
    x = range(len(classes))
    width = 0.27
    for i, (name, pick) in enumerate((("AP", 0), ("AP50", 1), ("AP25", 2))):
        vals = [report.per_class_ap[c][pick] for c in classes]
        ax.bar([xi + (i - 1) * width for xi in x], vals, width=width, label=name)
    ax.set_xticks(list(x))
    ax.set_xticklabels(labels)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("average precision")
    ax.axhline(report.ap, color="k", ls=":", lw=1,
               label=f"mean AP {report.ap:.3f}")
    ax.legend(fontsize=8)
    ax.set_title("per-class average precision")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_ablation_figure(axis: str, rows: list, path):
    plt = _plt()
    fig, ax = plt.subplots(figsize=(6, 4))
    xs = [r[0] for r in rows]
    aps = [r[1] for r in rows]
    ax.plot(xs, aps, marker="o", label="AP")
    ax.set_ylabel("AP")
    ax.set_ylim(0, 1.02)
    if axis == "unet_levels":
        ax.set_xlabel("refiner U-Net levels")
    else:
        ax.set_xlabel("approx. proposal count")
        if len(rows[0]) > 2:
            ax2 = ax.twinx()
            ax2.plot(xs, [r[2] for r in rows], marker="s", color="tab:red",
                     label="median runtime")
            ax2.set_ylabel("median runtime (s)", color="tab:red")
    ax.legend(loc="lower right", fontsize=8)
    ax.set_title(f"ablation: {axis}")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_runtime_figure(stats, path):
    plt = _plt()
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.hist(stats.samples, bins=min(20, max(5, len(stats.samples) // 3)),
            color="tab:blue", alpha=0.8)
    ax.axvline(stats.median_s, color="k", ls="--",
               label=f"median {stats.median_s * 1e3:.1f} ms")
    ax.axvline(stats.p90_s, color="tab:red", ls=":",
               label=f"p90 {stats.p90_s * 1e3:.1f} ms")
    ax.set_xlabel("per-scene inference time (s)")
    ax.set_ylabel("count")
    ax.legend(fontsize=8)
    ax.set_title("end-to-end runtime")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p
