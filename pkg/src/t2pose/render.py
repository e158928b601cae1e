"""Stick-figure rendering of poses (SVG, optional PNG)."""

from __future__ import annotations

from pathlib import Path

from .pose import BODY_EDGES, FACE, HAND_EDGES, LEFT_HAND, RIGHT_HAND, Pose

# one color per body edge, OpenPose-like rainbow
BODY_EDGE_COLORS = (
    "#ff0000", "#ff5500", "#ffaa00", "#ffff00", "#aaff00", "#55ff00",
    "#00ff00", "#00ff55", "#00ffaa", "#00ffff", "#00aaff", "#0055ff",
    "#0000ff", "#5500ff", "#aa00ff", "#ff00ff", "#ff00aa",
)
BODY_JOINT_COLOR = "#ffffff"
FACE_COLOR = "#ffffff"
FINGER_COLORS = ("#ff3030", "#f0c020", "#30e040", "#20b0ff", "#c040ff")
BACKGROUND = "#000000"


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def render_pose(pose: Pose, size: int = 512) -> str:
    """Return a deterministic SVG document for ``pose``.

    Missing keypoints, and edges touching them, are omitted.
    """
    if size < 64:
        raise ValueError(f"size must be >= 64, got {size}")
    xy = pose.xy * size
    ex = pose.exists
    stroke = max(1.0, size / 128)
    r_body = max(1.5, size / 100)
    r_small = max(0.8, size / 300)
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
        f'viewBox="0 0 {size} {size}">',
        f'<rect x="0" y="0" width="{size}" height="{size}" fill="{BACKGROUND}"/>',
    ]

    def line(i, j, color, cls):
        lines.append(
            f'<line class="{cls}" x1="{_fmt(xy[i, 0])}" y1="{_fmt(xy[i, 1])}" '
            f'x2="{_fmt(xy[j, 0])}" y2="{_fmt(xy[j, 1])}" stroke="{color}" '
            f'stroke-width="{_fmt(stroke)}" stroke-linecap="round"/>'
        )

    def dot(i, color, r, cls):
        lines.append(
            f'<circle class="{cls}" cx="{_fmt(xy[i, 0])}" cy="{_fmt(xy[i, 1])}" r="{_fmt(r)}" fill="{color}"/>'
        )

    for (i, j), color in zip(BODY_EDGES, BODY_EDGE_COLORS):
        if ex[i] and ex[j]:
            line(i, j, color, "body-edge")
    for i in range(18):
        if ex[i]:
            dot(i, BODY_JOINT_COLOR, r_body, "body-joint")
    for i in range(FACE.start, FACE.stop):
        if ex[i]:
            dot(i, FACE_COLOR, r_small, "face-point")
    for hand in (LEFT_HAND, RIGHT_HAND):
        base = hand.start
        for k, (a, b) in enumerate(HAND_EDGES):
            if ex[base + a] and ex[base + b]:
                line(base + a, base + b, FINGER_COLORS[k // 4], "hand-edge")
        for i in range(hand.start, hand.stop):
            if ex[i]:
                dot(i, FACE_COLOR, r_small, "hand-point")
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def save_svg(pose: Pose, path, size: int = 512) -> None:
    Path(path).write_text(render_pose(pose, size))


def save_png(pose: Pose, path, size: int = 512) -> None:
    """Rasterize via matplotlib (Agg)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    dpi = 100
    fig = plt.figure(figsize=(size / dpi, size / dpi), dpi=dpi)
    ax = fig.add_axes([0, 0, 1, 1])
    ax.set_facecolor(BACKGROUND)
    ax.set_xlim(0, 1)
    ax.set_ylim(1, 0)
    ax.axis("off")
    fig.patch.set_facecolor(BACKGROUND)
    xy, ex = pose.xy, pose.exists
    for (i, j), color in zip(BODY_EDGES, BODY_EDGE_COLORS):
        if ex[i] and ex[j]:
            ax.plot(xy[[i, j], 0], xy[[i, j], 1], color=color, lw=3, solid_capstyle="round")
    for hand in (LEFT_HAND, RIGHT_HAND):
        for k, (a, b) in enumerate(HAND_EDGES):
            i, j = hand.start + a, hand.start + b
            if ex[i] and ex[j]:
                ax.plot(xy[[i, j], 0], xy[[i, j], 1], color=FINGER_COLORS[k // 4], lw=1)
    pts = xy[ex]
    if len(pts):
        ax.scatter(pts[:, 0], pts[:, 1], s=4, c="white", zorder=3)
    fig.savefig(path, facecolor=BACKGROUND)
    plt.close(fig)


def count_elements(svg: str) -> dict[str, int]:
    """Count drawn elements by class; handy for tests and sanity checks."""
    classes = ("body-edge", "body-joint", "face-point", "hand-edge", "hand-point")
    counts = {c: svg.count(f'class="{c}"') for c in classes}
    counts["total"] = svg.count("<line") + svg.count("<circle")
    return counts
