"""Figure defaults and SVG output for the evaluation reports."""

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

golden_mean = (math.sqrt(5) - 1.0) / 2.0
fig_width = 6.0
fig_size = [fig_width, fig_width * golden_mean]

# one colour per model series, fixed so reruns render identically
colors = {
    "none": "#9e9e9e",
    "cgan": "#2b8cbe",
    "cyclegan": "#d95f02",
}
fallback_colors = ["#1b9e77", "#7570b3", "#e7298a", "#66a61e"]

params = {
    "font.family": "DejaVu Sans",
    "font.size": 9,
    "axes.labelsize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "lines.linewidth": 1.4,
    "lines.markersize": 4,
    "figure.figsize": fig_size,
    "svg.hashsalt": "docuforge",
    "svg.fonttype": "path",
}


def color_for(model, index=0):
    return colors.get(model, fallback_colors[index % len(fallback_colors)])


def new_figure(**kw):
    with plt.rc_context(params):
        fig, ax = plt.subplots(**kw)
    return fig, ax


def save_svg(fig, path):
    """Write ``fig`` as SVG with no date stamp, so identical data gives identical bytes."""
    with plt.rc_context(params):
        fig.savefig(path, format="svg", metadata={"Date": None}, bbox_inches="tight")
    plt.close(fig)
