import json
import logging
from pathlib import Path
from typing import Any, Union

import pandas as pd

from backend.models.run_config import jsonable


class OutputWriter:
    """Writes run artefacts: CSV via pandas, JSON with sorted keys, UTF-8 with LF endings."""

    def __init__(self, directory: Union[str, Path]):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self.logger = logging.getLogger(__name__)

    def write_csv(self, name: str, frame: pd.DataFrame) -> Path:
        path = self.directory / name
        frame.to_csv(path, index=False, lineterminator='\n', float_format='%.17g', encoding='utf-8')
        self.logger.info(f"Wrote {len(frame)} rows to {path}")
        return path

    def write_json(self, name: str, data: Any) -> Path:
        path = self.directory / name
        text = json.dumps(jsonable(data), indent=2, sort_keys=True, allow_nan=False)
        path.write_text(text + '\n', encoding='utf-8')
        self.logger.info(f"Wrote {path}")
        return path

    def write_frame(self, stem: str, frame: pd.DataFrame, fmt: str = 'csv') -> Path:
        """Write a table as <stem>.csv or as <stem>.json (list of row objects)"""
        if fmt == 'csv':
            return self.write_csv(f"{stem}.csv", frame)
        records = frame.to_dict(orient='records')
        return self.write_json(f"{stem}.json", records)
