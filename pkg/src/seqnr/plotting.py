"""Small SVG line charts for loss and residual histories.

Output is byte-stable for identical inputs: no timestamp in the metadata and
a fixed hash salt for element ids.
"""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

_RC = {"svg.hashsalt": "seqnr", "svg.fonttype": "path"}


def line_chart(path, series, title, xlabel, ylabel, log_y=False):
    """Write ``series`` (``label -> (x, y)``) as one SVG line chart."""
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(6.0, 4.0))
        for label, (x, y) in series.items():
            ax.plot(list(x), list(y), label=label, linewidth=1.2)
        if log_y and all(v > 0 for _, ys in series.values() for v in ys):
            ax.set_yscale("log")
        ax.set_title(title)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        if len(series) > 1:
            ax.legend(fontsize="small")
        ax.grid(True, alpha=0.3)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
    return path
