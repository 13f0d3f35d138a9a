"""PDF run report for one output directory."""

import json
import logging
from datetime import datetime
from io import BytesIO
from pathlib import Path
from typing import Any, Dict

import numpy as np
from reportlab.lib import colors
from reportlab.lib.enums import TA_CENTER, TA_JUSTIFY
from reportlab.lib.pagesizes import A4
from reportlab.lib.styles import ParagraphStyle, getSampleStyleSheet
from reportlab.lib.units import inch
from reportlab.platypus import Paragraph, SimpleDocTemplate, Spacer, Table, TableStyle

from core.pipeline import EVAL_FILE, FINETUNED_FILE, METRICS_FILE
from utils.caching import SECTION_DIFFUSION, atomic_write_bytes, find_section, load_checkpoint
from utils.config import AppConfig
from utils.errors import StateError
from utils.helpers import read_metrics, safe_filename

logger = logging.getLogger(__name__)


def collect_run_summary(output_dir) -> Dict[str, Any]:
    """Everything the report shows, gathered from the artifacts of a finished run."""
    out = Path(output_dir)
    if not out.is_dir():
        raise StateError(f"no output directory at {out}")
    summary: Dict[str, Any] = {"output_dir": str(out), "ledger": None, "selection": None,
                               "dp_stamped": False, "config_hash": None, "eval": {}}

    finetuned = out / FINETUNED_FILE
    if finetuned.exists():
        section = find_section(load_checkpoint(finetuned), SECTION_DIFFUSION)
        meta = section.meta if section else {}
        summary.update(ledger=meta.get("ledger"), selection=meta.get("selection"),
                       dp_stamped=bool(meta.get("dp_stamped")), config_hash=meta.get("config_hash"))

    eval_path = out / EVAL_FILE
    if eval_path.exists():
        summary["eval"] = json.loads(eval_path.read_text(encoding="utf-8"))
        summary["config_hash"] = summary["config_hash"] or summary["eval"].get("config_hash")

    steps = [r for r in read_metrics(out / METRICS_FILE) if r.get("stage") == "finetune-dp"]
    if steps:
        clipped = np.array([r["clipped_fraction"] for r in steps])
        summary["clipping"] = {"steps": len(steps), "mean": float(clipped.mean()),
                               "min": float(clipped.min()), "max": float(clipped.max()),
                               "mean_batch": float(np.mean([r["batch_size"] for r in steps]))}
    return summary


def _fmt(value, spec: str = ".4g") -> str:
    if value is None:
        return "n/a"
    return format(value, spec) if isinstance(value, float) else str(value)


def generate_pdf_report_bytes(summary: Dict[str, Any]) -> bytes:
    buffer = BytesIO()
    doc = SimpleDocTemplate(buffer, pagesize=A4, topMargin=0.5 * inch, bottomMargin=0.5 * inch)
    story = []
    styles = getSampleStyleSheet()
    title_style = ParagraphStyle('Title', parent=styles['Heading1'], fontSize=20,
                                 textColor=colors.HexColor(AppConfig.COLORS['primary']), alignment=TA_CENTER)
    subtitle_style = ParagraphStyle('Subtitle', parent=styles['Heading2'], fontSize=12,
                                    textColor=colors.HexColor(AppConfig.COLORS['secondary']),
                                    alignment=TA_CENTER)
    body_style = ParagraphStyle('Body', parent=styles['Normal'], fontSize=11, alignment=TA_JUSTIFY, leading=14)
    table_style = TableStyle([
        ('GRID', (0, 0), (-1, -1), 0.5, colors.HexColor('#BDC3C7')),
        ('BACKGROUND', (0, 0), (0, -1), colors.HexColor('#ECF0F1')),
        ('VALIGN', (0, 0), (-1, -1), 'MIDDLE'),
    ])

    story.append(Paragraph(AppConfig.APP_TITLE, title_style))
    story.append(Paragraph("Differentially Private Fine-Tuning Report", subtitle_style))
    story.append(Spacer(1, 0.2 * inch))

    story.append(Paragraph("<b>Run:</b>", styles['Heading3']))
    story.append(Paragraph(f"{summary['output_dir']} (config {(summary.get('config_hash') or 'n/a')[:16]})",
                           body_style))
    story.append(Spacer(1, 0.1 * inch))

    ledger = summary.get("ledger")
    if ledger:
        stamp_color = AppConfig.COLORS['success'] if summary["dp_stamped"] else AppConfig.COLORS['danger']
        stamp = "stamped as DP" if summary["dp_stamped"] else "NOT stamped as DP"
        rows = [
            ['Epsilon', _fmt(ledger.get("epsilon"))],
            ['Delta', _fmt(ledger.get("delta"))],
            ['Sampling rate q', _fmt(ledger.get("q"))],
            ['Noise multiplier', _fmt(ledger.get("sigma"))],
            ['DP-SGD steps', _fmt(ledger.get("steps"))],
        ]
        story.append(Paragraph("<b>Privacy Ledger</b>", styles['Heading3']))
        table = Table(rows, colWidths=[2.5 * inch, 3.5 * inch])
        table.setStyle(table_style)
        story.append(table)
        story.append(Paragraph(f"<font color='{stamp_color}'>Checkpoint {stamp}</font>", body_style))
        story.append(Spacer(1, 0.2 * inch))
    else:
        story.append(Paragraph("No fine-tuned checkpoint in this directory.", body_style))

    selection = summary.get("selection")
    if selection:
        story.append(Paragraph("<b>Trainable Parameters</b>", styles['Heading3']))
        story.append(Paragraph(
            f"Spec '{selection['spec'] or '{}'}': {selection['trainable']} of {selection['total']} "
            f"parameters ({100 * selection['fraction']:.1f}%).", body_style))
        story.append(Spacer(1, 0.1 * inch))

    clipping = summary.get("clipping")
    if clipping:
        story.append(Paragraph("<b>Clipping</b>", styles['Heading3']))
        table = Table([
            ['Steps logged', str(clipping["steps"])],
            ['Mean logical batch', f"{clipping['mean_batch']:.1f}"],
            ['Clipped fraction (mean)', f"{clipping['mean']:.3f}"],
            ['Clipped fraction (min / max)', f"{clipping['min']:.3f} / {clipping['max']:.3f}"],
        ], colWidths=[2.5 * inch, 3.5 * inch])
        table.setStyle(table_style)
        story.append(table)
        story.append(Spacer(1, 0.2 * inch))

    results = {k: v for k, v in summary.get("eval", {}).items() if k != "config_hash"}
    if results:
        story.append(Paragraph("<b>Evaluation</b>", styles['Heading3']))
        for key in sorted(results):
            value = results[key]
            if isinstance(value, dict):
                value = ", ".join(f"{k}={_fmt(v)}" for k, v in sorted(value.items()) if not isinstance(v, dict))
            story.append(Paragraph(f"• {key}: {_fmt(value)}", body_style))
            story.append(Spacer(1, 0.02 * inch))

    story.append(Spacer(1, 0.2 * inch))
    story.append(Paragraph(
        "<i>Noise was drawn from a seeded pseudo-random generator for reproducibility. "
        "These artifacts are research outputs, not a deployment-grade private release.</i>",
        ParagraphStyle('disclaimer', parent=styles['Normal'], fontSize=9, alignment=TA_CENTER)))
    story.append(Spacer(1, 0.1 * inch))
    story.append(Paragraph(
        f"<i>Report generated on {datetime.now().strftime('%B %d, %Y at %I:%M %p')}</i>",
        ParagraphStyle('meta', parent=styles['Normal'], fontSize=9, alignment=TA_CENTER)))

    doc.build(story)
    buffer.seek(0)
    return buffer.getvalue()


def write_report(output_dir, dest=None) -> Path:
    summary = collect_run_summary(output_dir)
    if dest is None:
        name = safe_filename(Path(output_dir).name)
        dest = Path(output_dir) / f"dpldm_{name}_{datetime.now().strftime('%Y%m%d_%H%M%S')}.pdf"
    dest = Path(dest)
    atomic_write_bytes(dest, generate_pdf_report_bytes(summary))
    logger.info("wrote report %s", dest)
    return dest
