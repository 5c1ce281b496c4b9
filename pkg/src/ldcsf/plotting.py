"""ROC export: CSV rows and a dependency-free SVG figure."""

import csv
from xml.sax.saxutils import escape

CURVE_ORDER = ("micro", "macro", "interstitial_area", "necrosis", "non_tumor", "tumor")
_COLOURS = {
    "micro": "#d62728",
    "macro": "#1f1f8f",
    "interstitial_area": "#2ca02c",
    "necrosis": "#ff7f0e",
    "non_tumor": "#17becf",
    "tumor": "#9467bd",
}
_DASHED = {"micro", "macro"}


def report_curves(report):
    curves = {"micro": report.micro, "macro": report.macro}
    curves.update(report.roc)
    return {name: curves[name] for name in CURVE_ORDER if name in curves}


def write_roc_csv(report, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["curve", "fpr", "tpr"])
        for name, curve in report_curves(report).items():
            for f, t in zip(curve.fpr, curve.tpr):
                writer.writerow([name, repr(float(f)), repr(float(t))])


def roc_svg(report, size=480, margin=56, title="ROC curves"):
    plot = size - 2 * margin

    def px(f, t):
        return f"{margin + f * plot:.2f},{margin + (1.0 - t) * plot:.2f}"

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size + 200}" height="{size}" '
        f'viewBox="0 0 {size + 200} {size}" font-family="sans-serif" font-size="12">',
        f'<rect x="0" y="0" width="{size + 200}" height="{size}" fill="white"/>',
        f'<text x="{size / 2:.0f}" y="{margin / 2:.0f}" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<rect x="{margin}" y="{margin}" width="{plot}" height="{plot}" fill="none" stroke="black"/>',
        f'<polyline points="{px(0, 0)} {px(1, 1)}" fill="none" stroke="#888" stroke-dasharray="4,4"/>',
    ]
    for i in range(6):
        v = i / 5
        parts.append(f'<text x="{margin + v * plot:.1f}" y="{margin + plot + 16}" text-anchor="middle">{v:.1f}</text>')
        parts.append(f'<text x="{margin - 8}" y="{margin + (1 - v) * plot + 4:.1f}" text-anchor="end">{v:.1f}</text>')
    parts.append(f'<text x="{margin + plot / 2:.0f}" y="{size - 12}" text-anchor="middle">False positive rate</text>')
    parts.append(
        f'<text x="14" y="{margin + plot / 2:.0f}" text-anchor="middle" '
        f'transform="rotate(-90 14 {margin + plot / 2:.0f})">True positive rate</text>'
    )
    for k, (name, curve) in enumerate(report_curves(report).items()):
        colour = _COLOURS[name]
        dash = ' stroke-dasharray="6,3"' if name in _DASHED else ""
        pts = " ".join(px(f, t) for f, t in zip(curve.fpr, curve.tpr))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{colour}" stroke-width="2"{dash}/>')
        y = margin + 16 * k + 8
        parts.append(f'<line x1="{size}" y1="{y}" x2="{size + 20}" y2="{y}" stroke="{colour}" stroke-width="2"{dash}/>')
        parts.append(f'<text x="{size + 26}" y="{y + 4}">{escape(name)} (AUC {curve.auc:.4f})</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_roc_svg(report, path, **kwargs):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(roc_svg(report, **kwargs))
