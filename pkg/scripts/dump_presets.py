#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Dump cost reports of every preset - Выгрузка отчётов по всем пресетам

Usage: python scripts/dump_presets.py [out_dir] [resolution]
"""

import logging
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from app.config import Settings  # noqa: E402
from app.core.errors import GeometryError  # noqa: E402
from app.logging_conf import configure_logging  # noqa: E402
from app.models.config import get_preset, preset_names  # noqa: E402
from app.services.analysis import count_flops  # noqa: E402
from app.utils.export_manager import ExportFormat, ReportExporter  # noqa: E402

logger = logging.getLogger("dump_presets")


def main(out_dir: str = "runs/presets", resolution: int = 224):
    configure_logging(Settings.load())
    exporter = ReportExporter()
    out = Path(out_dir)
    for name in preset_names():
        try:
            report = count_flops(get_preset(name), resolution)
        except GeometryError as exc:
            logger.warning(f"skipping {name}: {exc}")
            continue
        exporter.export_cost_report(report, ExportFormat.JSON, out / f"{name}_{resolution}.json")
        exporter.export_cost_report(report, ExportFormat.CSV, out / f"{name}_{resolution}.csv")
    logger.info(f"reports written to {out}")


if __name__ == "__main__":
    args = sys.argv[1:]
    main(args[0] if args else "runs/presets", int(args[1]) if len(args) > 1 else 224)
