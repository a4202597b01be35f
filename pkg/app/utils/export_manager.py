#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Export Manager - Менеджер экспорта
Report export to JSON, JSON lines and CSV
"""

import io
import csv
import json
import logging
from pathlib import Path
from typing import List, Dict, Any, Iterable, Optional, Union

import numpy as np

from app.core.errors import ConfigError


class ExportFormat:
    """Export format constants"""
    CSV = "csv"
    JSON = "json"
    JSONL = "jsonl"


def json_serializer(obj):
    """JSON serializer for numpy scalars, arrays and tuples"""
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"Object of type {type(obj)} is not JSON serializable")


class DataExporter:
    """Base data exporter class"""

    def __init__(self):
        self.logger = logging.getLogger(__name__)

    def _write(self, content: str, filename: Optional[Union[str, Path]]):
        if filename:
            path = Path(filename)
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, 'w', encoding='utf-8', newline='') as f:
                f.write(content)
            self.logger.info(f"report written to {path}")

    def export_to_csv(self, data: List[Dict[str, Any]], filename: Optional[Union[str, Path]] = None) -> str:
        """Export rows to CSV format"""
        if not data:
            return ""

        output = io.StringIO()
        fieldnames = list(data[0].keys())
        writer = csv.DictWriter(output, fieldnames=fieldnames)
        writer.writeheader()
        for row in data:
            writer.writerow({key: "" if value is None else value for key, value in row.items()})

        content = output.getvalue()
        output.close()
        self._write(content, filename)
        return content

    def export_to_json(self, data: Any, filename: Optional[Union[str, Path]] = None) -> str:
        """Export data to JSON format"""
        json_content = json.dumps(data, indent=2, ensure_ascii=False, default=json_serializer)
        self._write(json_content + "\n", filename)
        return json_content

    def export_to_jsonl(self, records: Iterable[Dict[str, Any]],
                        filename: Optional[Union[str, Path]] = None) -> str:
        """One compact JSON object per line"""
        lines = [json.dumps(record, sort_keys=True, default=json_serializer) for record in records]
        content = "".join(line + "\n" for line in lines)
        self._write(content, filename)
        return content


class ReportExporter(DataExporter):
    """Exporter for cost reports and training logs"""

    def get_supported_formats(self) -> List[str]:
        return [ExportFormat.JSON, ExportFormat.CSV]

    def validate_format(self, export_format: str) -> bool:
        return export_format in self.get_supported_formats()

    def export_cost_report(self, report, export_format: str = ExportFormat.JSON,
                           filename: Optional[Union[str, Path]] = None) -> str:
        if not self.validate_format(export_format):
            raise ConfigError(f"unsupported report format '{export_format}'; "
                              f"choose from {self.get_supported_formats()}")
        if export_format == ExportFormat.CSV:
            return self.export_to_csv(report.to_dict()["rows"], filename)
        return self.export_to_json(report.to_dict(), filename)

    def export_train_log(self, log, filename: Optional[Union[str, Path]] = None) -> str:
        return self.export_to_jsonl(log.records, filename)
