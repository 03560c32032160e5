import json
from pathlib import Path
from typing import Any, Dict, Iterator, List, Union


class RunLog:
    """
    Line-delimited JSON file that only ever grows.

    Metrics logs, trajectory logs and per-seed result files all go through
    this one class so their format stays identical.
    """

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)

    def append(self, record: Dict[str, Any]) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with self.path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")

    def extend(self, records) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with self.path.open("a", encoding="utf-8") as fh:
            for record in records:
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    def __iter__(self) -> Iterator[Dict[str, Any]]:
        if not self.path.exists():
            return
        with self.path.open(encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    yield json.loads(line)

    def read(self) -> List[Dict[str, Any]]:
        return list(self)

    def count(self) -> int:
        return sum(1 for _ in self)

    def exists(self) -> bool:
        return self.path.exists()
