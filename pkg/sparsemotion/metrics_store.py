"""
Metrics store for training runs and streaming sessions.

Every record is appended to a JSON-lines file. When a DuckDB path is
configured the same record is mirrored into one of two tables:
1. train_steps - one row per optimizer step (loss components, grad norm, routing)
2. stream_chunks - one row per streamed chunk (stage timings, decoder steps)
"""

import itertools
import json
import logging
import threading
import uuid
from pathlib import Path
from typing import Any

import duckdb

logger = logging.getLogger(__name__)


class MetricsStore:
    """Thread-safe JSON-lines writer with an optional DuckDB mirror."""

    def __init__(self, jsonl_path: str | Path | None = None, db_path: str | Path | None = None, run_id: str | None = None):
        """
        Initialize the store.

        Args:
            jsonl_path: JSON-lines output file (created or appended)
            db_path: Optional DuckDB database file
            run_id: Identifier stamped on every row; random when omitted
        """
        self.jsonl_path = Path(jsonl_path) if jsonl_path else None
        self.db_path = str(db_path) if db_path else None
        self.run_id = run_id or uuid.uuid4().hex[:12]
        self.lock = threading.Lock()
        self._ids = itertools.count(1)
        if self.jsonl_path:
            self.jsonl_path.parent.mkdir(parents=True, exist_ok=True)
        if self.db_path:
            self._init_database()

    def _init_database(self):
        """Create tables if they don't exist."""
        with self.lock:
            conn = duckdb.connect(self.db_path)
            try:
                conn.execute("""
                    CREATE TABLE IF NOT EXISTS train_steps (
                        id BIGINT,
                        run_id VARCHAR NOT NULL,
                        timestamp TIMESTAMP DEFAULT CURRENT_TIMESTAMP,
                        stage VARCHAR NOT NULL,
                        step INTEGER NOT NULL,
                        ce DOUBLE,
                        l_moe DOUBLE,
                        l_vel DOUBLE,
                        l_acc DOUBLE,
                        grad_norm DOUBLE,
                        routing JSON
                    )
                """)
                conn.execute("""
                    CREATE TABLE IF NOT EXISTS stream_chunks (
                        id BIGINT,
                        run_id VARCHAR NOT NULL,
                        timestamp TIMESTAMP DEFAULT CURRENT_TIMESTAMP,
                        chunk_index INTEGER NOT NULL,
                        decoder_steps INTEGER,
                        frames INTEGER,
                        total_ms DOUBLE,
                        stages JSON
                    )
                """)
                conn.execute("CREATE INDEX IF NOT EXISTS idx_train_steps_run ON train_steps(run_id)")
                conn.execute("CREATE INDEX IF NOT EXISTS idx_stream_chunks_run ON stream_chunks(run_id)")
                logger.info("Metrics database initialized at %s", self.db_path)
            except Exception as e:
                logger.error("Error initializing metrics database: %s", e)
                raise
            finally:
                conn.close()

    def _append_jsonl(self, record: dict[str, Any]):
        if self.jsonl_path is None:
            return
        with open(self.jsonl_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")

    def log_train_step(self, stage: str, step: int, metrics: dict[str, Any]):
        """
        Record one optimizer step.

        Args:
            stage: pretrain, s1, s2 or interp
            step: 1-based step index
            metrics: ce, l_moe, l_vel, l_acc, grad_norm and per-layer ``f_e``
        """
        record = {"stage": stage, "step": step, **metrics}
        with self.lock:
            self._append_jsonl(record)
            if not self.db_path:
                return
            conn = duckdb.connect(self.db_path)
            try:
                conn.execute(
                    """
                    INSERT INTO train_steps (
                        id, run_id, stage, step, ce, l_moe, l_vel, l_acc, grad_norm, routing
                    ) VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?, ?)
                """,
                    [
                        next(self._ids),
                        self.run_id,
                        stage,
                        step,
                        metrics.get("ce"),
                        metrics.get("l_moe"),
                        metrics.get("l_vel"),
                        metrics.get("l_acc"),
                        metrics.get("grad_norm"),
                        json.dumps(metrics.get("f_e", {})),
                    ],
                )
            except Exception as e:
                logger.error("Error logging train step %d: %s", step, e)
                raise
            finally:
                conn.close()

    def log_stream_chunk(self, profile: dict[str, Any]):
        """Record one streamed chunk's ``StepProfile`` dict."""
        with self.lock:
            self._append_jsonl(profile)
            if not self.db_path:
                return
            conn = duckdb.connect(self.db_path)
            try:
                conn.execute(
                    """
                    INSERT INTO stream_chunks (
                        id, run_id, chunk_index, decoder_steps, frames, total_ms, stages
                    ) VALUES (?, ?, ?, ?, ?, ?, ?)
                """,
                    [
                        next(self._ids),
                        self.run_id,
                        profile["chunk_index"],
                        profile.get("decoder_steps"),
                        profile.get("frames"),
                        profile.get("total_ms"),
                        json.dumps(profile.get("stages_ms", {})),
                    ],
                )
            except Exception as e:
                logger.error("Error logging stream chunk: %s", e)
                raise
            finally:
                conn.close()

    def get_train_steps(self, stage: str | None = None) -> list[dict]:
        """
        Read back this run's train steps from DuckDB.

        Returns:
            List of row dicts ordered by step
        """
        if not self.db_path:
            return []
        with self.lock:
            conn = duckdb.connect(self.db_path)
            try:
                query = "SELECT * FROM train_steps WHERE run_id = ?"
                params: list[Any] = [self.run_id]
                if stage:
                    query += " AND stage = ?"
                    params.append(stage)
                result = conn.execute(query + " ORDER BY step", params).fetchall()
                columns = [desc[0] for desc in conn.description]
                return [dict(zip(columns, row, strict=False)) for row in result]
            except Exception as e:
                logger.error("Error reading train steps: %s", e)
                return []
            finally:
                conn.close()

    def get_stream_chunks(self) -> list[dict]:
        if not self.db_path:
            return []
        with self.lock:
            conn = duckdb.connect(self.db_path)
            try:
                result = conn.execute(
                    "SELECT * FROM stream_chunks WHERE run_id = ? ORDER BY chunk_index",
                    [self.run_id],
                ).fetchall()
                columns = [desc[0] for desc in conn.description]
                return [dict(zip(columns, row, strict=False)) for row in result]
            except Exception as e:
                logger.error("Error reading stream chunks: %s", e)
                return []
            finally:
                conn.close()


def read_jsonl(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
