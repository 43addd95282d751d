"""Figure rendering for the report subcommands.

Each helper saves one PNG next to the delimited report output and
returns the path.  Rendering uses the Agg backend so the CLI works
headless.
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def fig_ell_decay(ordering, path):
    """Log-log decay of the ordering scales with a -1/2 reference slope."""
    ell = ordering.ell
    idx = np.arange(1, ell.shape[0])
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.loglog(idx, ell[1:], ".", ms=3, label=r"$\ell_i$")
    anchor = max(1, min(10, idx[-1]))
    ref = ell[anchor] * (idx / anchor) ** -0.5
    ax.loglog(idx, ref, "k--", lw=1, label="slope -1/2")
    ax.set_xlabel("position in ordering")
    ax.set_ylabel("distance to earlier points")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def fig_per_field(values, mean, se, path, xlabel):
    """Histogram of per-field values with the mean and a 2-SE band."""
    values = np.asarray(values, dtype=float)
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.hist(values, bins=min(30, max(5, values.size // 3)), color="C0", alpha=0.75)
    ax.axvline(mean, color="k", lw=1.5, label=f"mean = {mean:.4g}")
    ax.axvspan(mean - 2 * se, mean + 2 * se, color="k", alpha=0.15, label="±2 SE")
    ax.set_xlabel(xlabel)
    ax.set_ylabel("fields")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def fig_diagnostics(diag, path):
    """QQ panel of pooled coefficients plus lag-1 autocorrelation if present."""
    two = diag.lag1 is not None
    fig, axes = plt.subplots(1, 2 if two else 1, figsize=(9 if two else 5, 4))
    ax = axes[0] if two else axes
    ax.plot(diag.qq_theoretical, diag.qq_empirical, ".", ms=4)
    lim = max(np.abs(diag.qq_theoretical).max(), np.abs(diag.qq_empirical).max()) * 1.05
    ax.plot([-lim, lim], [-lim, lim], "k--", lw=1)
    ax.set_xlabel("standard normal quantiles")
    ax.set_ylabel("coefficient quantiles")
    ax.set_title(f"pooled mean {diag.pooled_mean:.3f}, var {diag.pooled_var:.3f}")
    if two:
        ax2 = axes[1]
        L = diag.sequence_length
        ax2.plot(np.arange(diag.lag1.shape[0]), diag.lag1, ".", ms=3)
        band = 2.0 / np.sqrt(L)
        ax2.axhline(0.0, color="k", lw=1)
        ax2.axhline(band, color="k", ls="--", lw=1)
        ax2.axhline(-band, color="k", ls="--", lw=1)
        ax2.set_xlabel("coefficient index")
        ax2.set_ylabel("lag-1 autocorrelation")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path
