import logging
import queue
import threading
from pathlib import Path

import pandas as pd

from training.results.metrics import METRICS_SCHEMA, TIMING_SCHEMA, RunRecord

logger = logging.getLogger(__name__)


class MetricsWriter:
    """
    Appends RunRecords to metrics.csv (and timing.csv) from a background
    thread, so the training loop never blocks on disk. Records arrive
    immutable and are written in submission order.
    """

    def __init__(self, metrics_path, timing_path=None):
        self.metrics_path = Path(metrics_path)
        self.timing_path = Path(timing_path) if timing_path else None
        self._queue = queue.Queue()
        self._errors = []
        self._columns = None
        self._thread = threading.Thread(target=self._run, name="metrics-writer", daemon=True)
        self._thread.start()

    def submit(self, record: RunRecord):
        self._queue.put(record)

    __call__ = submit

    def _append(self, path, schema, row, first):
        with open(path, "a" if not first else "w", encoding="utf8", newline="") as f:
            if first:
                f.write(f"# {schema}\n")
            pd.DataFrame([row]).to_csv(f, header=first, index=False, lineterminator="\n", float_format="%.9g")

    def _run(self):
        first = True
        while True:
            record = self._queue.get()
            if record is None:
                break
            try:
                row = record.to_row()
                if self._columns is None:
                    self._columns = list(row)
                elif list(row) != self._columns:
                    raise ValueError(f"metrics columns changed mid-run: {list(row)}")
                self._append(self.metrics_path, METRICS_SCHEMA, row, first)
                if self.timing_path is not None:
                    self._append(self.timing_path, TIMING_SCHEMA, record.to_timing_row(), first)
                first = False
            except Exception as e:
                logger.error("[MetricsWriter] failed to write epoch %s: %s", record.epoch, e)
                self._errors.append(e)

    def close(self):
        """Flush pending records and stop the worker; re-raises the first write error."""
        self._queue.put(None)
        self._thread.join()
        if self._errors:
            raise self._errors[0]

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False
