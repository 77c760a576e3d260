from typing import Dict, Optional

import pandas as pd
from openpyxl import Workbook
from openpyxl.styles import Alignment, Font, PatternFill
from openpyxl.utils import get_column_letter
from openpyxl.utils.dataframe import dataframe_to_rows

from simulation.sweep_runner import summarize

HEADER_FILL = PatternFill(start_color="366092", end_color="366092", fill_type="solid")
HEADER_FONT = Font(bold=True, color="FFFFFF")


def _style_header(ws):
    for cell in ws[1]:
        cell.font = HEADER_FONT
        cell.fill = HEADER_FILL
        cell.alignment = Alignment(horizontal="center")


class EfficiencyReportGenerator:
    """Workbook with a run summary, per-cell bench means, raw bench rows and the published-cell check."""

    def __init__(self, info: Dict[str, str], bench: Optional[pd.DataFrame] = None,
                 published: Optional[pd.DataFrame] = None):
        self.info = info
        self.bench = bench
        self.published = published

    def generate(self, output_path: str):
        wb = Workbook()

        ws_summary = wb.active
        ws_summary.title = "Summary"
        self._populate_summary(ws_summary)

        if self.bench is not None and not self.bench.empty:
            self._populate_frame(wb.create_sheet("Bench Means"), summarize(self.bench))
            self._populate_frame(wb.create_sheet("Bench Rows"), self.bench)

        if self.published is not None:
            self._populate_frame(wb.create_sheet("Published Cells"), self.published)

        wb.save(output_path)

    def _populate_summary(self, ws):
        ws.append(["Parameter", "Value"])
        _style_header(ws)
        for key, value in self.info.items():
            ws.append([key, str(value)])

        if self.published is not None:
            reproduced = int(self.published["reproduced"].sum())
            ws.append(["Published cells reproduced", f"{reproduced} / {len(self.published)}"])
            ws.append(["Worst interval error", f"{self.published['interval_rel_error'].max():.4%}"])
            ws.append(["Worst error at stated sizes", f"{self.published['estimate_rel_error'].max():.4%}"])
            over = int((~self.published["stated_within_tolerance"]).sum())
            ws.append(["Rows over 1% at stated sizes", f"{over} / {len(self.published)}"])

        ws.column_dimensions['A'].width = 32
        ws.column_dimensions['B'].width = 40

    def _populate_frame(self, ws, frame: pd.DataFrame):
        for row in dataframe_to_rows(frame, index=False, header=True):
            ws.append([None if isinstance(v, float) and pd.isna(v) else v for v in row])
        _style_header(ws)
        for idx in range(1, len(frame.columns) + 1):
            ws.column_dimensions[get_column_letter(idx)].width = 18
