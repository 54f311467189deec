import os
from typing import Dict, Iterable, List, Optional, Sequence, Type

import pandas as pd
from pydantic import BaseModel

from blocksim.engine import Event, export_event_log
from blocksim.metrics import ProbeRow, RequestRow, RunReport, SeriesRow
from blocksim.utils import model_to_primitive

SUMMARY_FILE = "summary.txt"
REQUESTS_FILE = "requests.csv"
SERIES_FILE = "timeseries.csv"
PROBES_FILE = "probes.csv"
PROVISIONS_FILE = "provisions.csv"
EVENTS_FILE = "events.jsonl"

PROVISION_COLUMNS = ("instance_id", "requested_s", "live_s", "trigger_s")


class ReportRepo:
    """
    RunReport exports of one run directory

    summary.txt holds one key=value row per aggregate; the tables are comma-separated with
    a header row. Column order follows the row models, so repeated runs write identical bytes.
    """

    def __init__(self, directory: str) -> None:
        self.directory = directory

    def write(self, report: RunReport, events: Optional[Sequence[Event]] = None) -> List[str]:
        """Write every export; returns the written paths"""
        os.makedirs(self.directory, exist_ok=True)
        paths = [
            self.write_summary(report),
            self.write_table(report.requests, RequestRow, REQUESTS_FILE),
            self.write_table(report.series, SeriesRow, SERIES_FILE),
            self.write_table(report.probes, ProbeRow, PROBES_FILE),
            self.write_frame(
                pd.DataFrame(report.provisions, columns=list(PROVISION_COLUMNS)), PROVISIONS_FILE
            ),
        ]
        if events is not None:
            with open(self.build_path(EVENTS_FILE), "w", encoding="utf-8") as f:
                export_event_log(list(events), f)
            paths.append(self.build_path(EVENTS_FILE))
        return paths

    def write_summary(self, report: RunReport) -> str:
        path = self.build_path(SUMMARY_FILE)
        with open(path, "w", encoding="utf-8") as f:
            for key, value in model_to_primitive(report.aggregates).items():
                f.write(f"{key}={_format(value)}\n")
        return path

    def read_summary(self) -> Dict[str, str]:
        with open(self.build_path(SUMMARY_FILE), encoding="utf-8") as f:
            return dict(line.rstrip("\n").split("=", 1) for line in f if line.strip())

    def write_table(
        self, rows: Iterable[BaseModel], row_type: Type[BaseModel], filename: str
    ) -> str:
        frame = pd.DataFrame(
            [model_to_primitive(row, keep_python_primitives=True) for row in rows],
            columns=list(row_type.__fields__),
        )
        return self.write_frame(frame, filename)

    def write_frame(self, frame: pd.DataFrame, filename: str) -> str:
        path = self.build_path(filename)
        frame.to_csv(path, index=False)
        return path

    def read_table(self, filename: str) -> pd.DataFrame:
        return pd.read_csv(self.build_path(filename))

    def build_path(self, filename: str) -> str:
        return os.path.join(self.directory, filename)


def _format(value: object) -> str:
    return "" if value is None else str(value)
