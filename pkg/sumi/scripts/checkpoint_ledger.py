#!/usr/bin/env python3
"""
Checkpoint Ledger - SQLite index of cached source-model checkpoints.

A checkpoint is keyed by a fingerprint of (TaskSpec, ModelSpec, training
settings, seed). Sweeps look the fingerprint up before training and reuse
the stored .npz when it is still on disk.
"""

import os
import sys
import json
import sqlite3
import hashlib
import logging
from pathlib import Path
from datetime import datetime, timezone
from typing import Dict, List, Optional

logger = logging.getLogger(__name__)

# Storage location (overridable with SUMI_CACHE_DIR)
CACHE_DIR = Path(os.environ.get("SUMI_CACHE_DIR", Path.home() / ".cache" / "sumi"))
LEDGER_DB_NAME = "checkpoints.db"


def default_cache_dir() -> Path:
    return Path(os.environ.get("SUMI_CACHE_DIR", CACHE_DIR))


def fingerprint(task: Dict, model: Dict, training: Dict, seed: int) -> str:
    """Stable 16-hex key for one source-model configuration."""
    payload = json.dumps({"task": task, "model": model, "training": training, "seed": seed},
                         sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


class CheckpointLedger:
    """Manages the checkpoint index database."""

    def __init__(self, cache_dir: Optional[Path] = None):
        self.cache_dir = Path(cache_dir) if cache_dir is not None else default_cache_dir()
        self.db_path = self.cache_dir / LEDGER_DB_NAME
        self._ensure_db()

    def _ensure_db(self):
        """Create database and tables if they don't exist."""
        self.db_path.parent.mkdir(parents=True, exist_ok=True)

        conn = sqlite3.connect(self.db_path)
        conn.executescript('''
            CREATE TABLE IF NOT EXISTS checkpoints (
                fingerprint TEXT PRIMARY KEY,
                path TEXT NOT NULL,
                task TEXT NOT NULL,
                model TEXT NOT NULL,
                training TEXT NOT NULL,
                seed INTEGER NOT NULL,
                clean_accuracy REAL,
                hits INTEGER DEFAULT 0,
                first_used TEXT,
                last_used TEXT
            );

            CREATE INDEX IF NOT EXISTS idx_seed ON checkpoints(seed);
        ''')
        conn.commit()
        conn.close()

    def _connect(self) -> sqlite3.Connection:
        conn = sqlite3.connect(self.db_path)
        conn.row_factory = sqlite3.Row
        return conn

    def checkpoint_path(self, key: str) -> Path:
        return self.cache_dir / "checkpoints" / f"{key}.npz"

    def lookup(self, key: str) -> Optional[Dict]:
        """Row for key if its checkpoint file still exists; stale rows are dropped."""
        conn = self._connect()
        row = conn.execute("SELECT * FROM checkpoints WHERE fingerprint = ?", (key,)).fetchone()
        if row is not None and not Path(row["path"]).exists():
            logger.warning("checkpoint %s missing on disk, dropping ledger row", row["path"])
            conn.execute("DELETE FROM checkpoints WHERE fingerprint = ?", (key,))
            conn.commit()
            row = None
        conn.close()
        return dict(row) if row else None

    def record(
        self,
        key: str,
        path: Path,
        task: Dict,
        model: Dict,
        training: Dict,
        seed: int,
        clean_accuracy: Optional[float],
    ) -> Dict:
        """Insert or replace the row for a freshly trained checkpoint."""
        now = datetime.now(timezone.utc).isoformat()
        conn = self._connect()
        conn.execute('''
            INSERT OR REPLACE INTO checkpoints
            (fingerprint, path, task, model, training, seed, clean_accuracy, hits, first_used, last_used)
            VALUES (?, ?, ?, ?, ?, ?, ?, 0, ?, ?)
        ''', (key, str(path), json.dumps(task, sort_keys=True), json.dumps(model, sort_keys=True),
              json.dumps(training, sort_keys=True), seed, clean_accuracy, now, now))
        conn.commit()
        conn.close()
        return {"action": "recorded", "fingerprint": key, "path": str(path)}

    def touch(self, key: str) -> bool:
        """Count a cache hit."""
        now = datetime.now(timezone.utc).isoformat()
        conn = self._connect()
        conn.execute("UPDATE checkpoints SET hits = hits + 1, last_used = ? WHERE fingerprint = ?", (now, key))
        affected = conn.total_changes
        conn.commit()
        conn.close()
        return affected > 0

    def list(self) -> List[Dict]:
        conn = self._connect()
        rows = [dict(r) for r in conn.execute("SELECT * FROM checkpoints ORDER BY last_used DESC")]
        conn.close()
        return rows

    def get_stats(self) -> Dict:
        """Get ledger statistics."""
        conn = self._connect()
        stats = {}
        stats["total_checkpoints"] = conn.execute("SELECT COUNT(*) FROM checkpoints").fetchone()[0]
        stats["total_hits"] = conn.execute("SELECT COALESCE(SUM(hits), 0) FROM checkpoints").fetchone()[0]
        cursor = conn.execute("SELECT seed, COUNT(*) AS count FROM checkpoints GROUP BY seed ORDER BY seed")
        stats["by_seed"] = {str(row["seed"]): row["count"] for row in cursor.fetchall()}
        accuracy = conn.execute("SELECT MIN(clean_accuracy), AVG(clean_accuracy) FROM checkpoints").fetchone()
        stats["min_clean_accuracy"] = accuracy[0]
        stats["mean_clean_accuracy"] = accuracy[1]
        conn.close()
        return stats


def main():
    import argparse
    parser = argparse.ArgumentParser(description="Checkpoint Ledger CLI")
    parser.add_argument("--cache-dir", type=Path, default=None, help="Cache directory (default: $SUMI_CACHE_DIR)")
    subparsers = parser.add_subparsers(dest="command")

    subparsers.add_parser("stats", help="Show statistics")
    subparsers.add_parser("list", help="List cached checkpoints")

    args = parser.parse_args()
    ledger = CheckpointLedger(args.cache_dir)

    if args.command == "stats":
        print(json.dumps(ledger.get_stats(), indent=2))

    elif args.command == "list":
        rows = ledger.list()
        print(f"Found {len(rows)} cached checkpoints:")
        for r in rows:
            acc = "n/a" if r["clean_accuracy"] is None else f"{r['clean_accuracy']:.3f}"
            print(f"  [{r['fingerprint'][:8]}] seed={r['seed']} acc={acc} hits={r['hits']} {r['path']}")

    else:
        parser.print_help()
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
