import json
from pathlib import Path
from typing import Dict, List, Optional

import aiosqlite

from .abstract import AbstractRunStore, RunRecord


class SqliteRunStore(AbstractRunStore):
    """
    Run history store based on SQLite.
    """

    def __init__(self, db_path: Path = Path("mia-runs.sqlite")):
        super().__init__()
        self.db_path = db_path
        self.connection: Optional[aiosqlite.Connection] = None

    async def connect(self):
        self.connection = await aiosqlite.connect(self.db_path)
        await self.connection.execute("pragma journal_mode=wal")
        await self.connection.execute("pragma synchronous=2")
        await self.connection.execute(
            (
                "CREATE TABLE IF NOT EXISTS run("
                "run_id integer PRIMARY KEY AUTOINCREMENT,"
                " label text,"
                " fingerprint text,"
                " created bigint,"
                " report text)"
            )
        )
        await self.connection.execute("CREATE INDEX IF NOT EXISTS label_index on run(label)")
        await self.connection.commit()

    @staticmethod
    def _row_to_run_record(row) -> RunRecord:
        return RunRecord(row[0], row[1], row[2], row[3], json.loads(row[4]))

    async def add_run(self, label: str, fingerprint: str, report: Dict, created: int) -> int:
        async with self.lock:
            cursor = await self.connection.execute(
                "INSERT INTO run(label, fingerprint, created, report) VALUES(?, ?, ?, ?)",
                (label, fingerprint, created, json.dumps(report, sort_keys=True)),
            )
            run_id = cursor.lastrowid
            await cursor.close()
            await self.connection.commit()
        return run_id

    async def get_runs(self, label: str) -> List[RunRecord]:
        cursor = await self.connection.execute(
            "SELECT run_id, label, fingerprint, created, report from run WHERE label=? ORDER BY run_id", (label,)
        )
        rows = await cursor.fetchall()
        await cursor.close()
        return [self._row_to_run_record(row) for row in rows]

    async def get_labels(self) -> List[str]:
        cursor = await self.connection.execute("SELECT DISTINCT label from run ORDER BY label")
        rows = await cursor.fetchall()
        await cursor.close()
        return [row[0] for row in rows]

    async def close(self):
        if self.connection is not None:
            await self.connection.close()
            self.connection = None
