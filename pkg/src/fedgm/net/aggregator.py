"""The aggregator service: barrier-synchronized masked aggregation plus the
masked distance service.

The aggregator is semi-honest by assumption and blind by construction: it is
never given the shared mask seed, receives model parameters only as masked
ring words, and receives embeddings only as left-inverse-masked rows.  The
`observable_state` dump exposes everything it ever stores so tests can scan
for plaintext leakage.

Per round it collects exactly one masked model per silo, ring-sums them, and
broadcasts the masked sum; unmasking happens silo-side.  After training it
collects the helper matrix and each silo's masked embeddings, computes the
per-member Gram and cosine-distance matrices, and then serves queries.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

from .. import flake, inference
from ..core import RingVec
from .framing import PROTOCOL_VERSION, array_from_wire, array_to_wire, encode_frame
from .transport import Connection, ConnectionClosed

_BARRIER_TIMEOUT = 300.0


class ProtocolError(Exception):
    """Violation that keeps the connection open (an error frame is sent)."""

    def __init__(self, code: str, detail: str):
        super().__init__(f"{code}: {detail}")
        self.code = code
        self.detail = detail


class SessionAborted(RuntimeError):
    pass


@dataclass(frozen=True)
class SessionConfig:
    """Parameters shared with the aggregator; never includes the mask seed."""

    session_id: str
    n_silos: int
    rounds: int
    scale_bits: int = 24
    k_list: tuple[int, ...] = inference.TOPK_DEFAULT
    subgroup_threshold: float | None = None
    subgroup_min_size: int = 2


def error_msg(session_id: str, code: str, detail: str) -> dict:
    return {
        "type": "error",
        "protocol_version": PROTOCOL_VERSION,
        "session_id": session_id,
        "code": code,
        "detail": detail,
    }


class Aggregator:
    """Transport-agnostic session state; `AggregatorServer` wires connections."""

    def __init__(self, session: SessionConfig):
        self.session = session
        self._lock = threading.Condition()
        self._trainers: set[int] = set()
        self._query_clients: set[int] = set()
        # round -> {silo: words}; completed rounds keep their masked sums only
        self._pending: dict[int, dict[int, np.ndarray]] = {}
        self._global_frames: dict[int, bytes] = {}
        self._aborted: str | None = None
        self._helper: np.ndarray | None = None
        self._uploads: dict[int, dict] = {}
        self._matrices_ready = threading.Event()
        # built after all uploads
        self._member_rows: list[np.ndarray] = []
        self._member_dist: list[flake.DistanceMatrix] = []
        self._ensemble_dist: flake.DistanceMatrix | None = None
        self._row_meta: dict[str, np.ndarray] = {}
        self._gallery_idx: np.ndarray | None = None
        self._subgroups: list[dict] = []
        self.state: dict = {
            "masked_models": {},
            "masked_sums": {},
            "helper": None,
            "masked_embeddings": {},
            "row_labels": None,
            "row_ids": None,
            "row_splits": None,
            "row_freq": None,
            "row_silos": None,
            "gram": [],
            "distances": [],
            "ensemble_distance": None,
            "events": [],
        }

    # -- registration ------------------------------------------------------

    def _event(self, kind: str, **info) -> None:
        self.state["events"].append({"event": kind, **info})

    def register(self, silo_id: int, role: str) -> None:
        with self._lock:
            if role == "trainer":
                if not 1 <= silo_id <= self.session.n_silos:
                    raise ProtocolError(
                        "bad_silo_id",
                        f"trainer id {silo_id} outside 1..{self.session.n_silos}",
                    )
                if silo_id in self._trainers:
                    raise ProtocolError("duplicate_silo", f"trainer {silo_id} already registered")
                self._trainers.add(silo_id)
            else:
                if silo_id in self._trainers or silo_id in self._query_clients:
                    raise ProtocolError("duplicate_silo", f"client {silo_id} already registered")
                self._query_clients.add(silo_id)
            self._event("hello", silo=silo_id, role=role)

    def abort(self, reason: str) -> None:
        with self._lock:
            if self._aborted is None:
                self._aborted = reason
                self._event("abort", reason=reason)
            self._lock.notify_all()
        self._matrices_ready.set()

    @property
    def aborted(self) -> str | None:
        return self._aborted

    # -- training rounds ----------------------------------------------------

    def submit_masked(self, silo_id: int, round_: int, words: np.ndarray) -> bytes:
        """Accept one masked model; blocks until the round's masked sum frame exists.

        Exactly one submission per silo per round is accepted; the barrier fires
        only when all N are present, so no masked_global can precede them.
        """
        words = np.asarray(words, dtype=np.uint64).ravel()
        with self._lock:
            if self._aborted:
                raise SessionAborted(self._aborted)
            if not 0 <= round_ < self.session.rounds:
                raise ProtocolError("wrong_round", f"round {round_} outside 0..{self.session.rounds - 1}")
            if round_ in self._global_frames or (
                round_ in self._pending and silo_id in self._pending[round_]
            ):
                raise ProtocolError(
                    "duplicate_submission",
                    f"silo {silo_id} already submitted round {round_}; first kept",
                )
            pending = self._pending.setdefault(round_, {})
            if pending and next(iter(pending.values())).size != words.size:
                raise ProtocolError("dim_mismatch", "model dimension differs across silos")
            pending[silo_id] = words
            self.state["masked_models"].setdefault(round_, {})[silo_id] = words
            self._event("submit", round=round_, silo=silo_id)
            if len(pending) == self.session.n_silos:
                total = np.zeros_like(words)
                for sid in sorted(pending):
                    total = total + pending[sid]
                self.state["masked_sums"][round_] = total
                self._event("aggregate", round=round_)
                msg = {
                    "type": "masked_global",
                    "protocol_version": PROTOCOL_VERSION,
                    "session_id": self.session.session_id,
                    "round": round_,
                    "n_silos": self.session.n_silos,
                    "scale_bits": self.session.scale_bits,
                    "words": array_to_wire(total),
                }
                self._global_frames[round_] = encode_frame(msg)
                del self._pending[round_]
                self._lock.notify_all()
            else:
                deadline = _BARRIER_TIMEOUT
                while round_ not in self._global_frames:
                    if self._aborted:
                        raise SessionAborted(self._aborted)
                    if not self._lock.wait(timeout=deadline):
                        raise SessionAborted(f"barrier timeout in round {round_}")
            self._event("broadcast", round=round_, silo=silo_id)
            return self._global_frames[round_]

    # -- distance service ---------------------------------------------------

    def set_helper(self, silo_id: int, K: np.ndarray) -> None:
        with self._lock:
            if self._helper is not None:
                raise ProtocolError("helper_exists", "helper matrix already uploaded")
            K = np.asarray(K, dtype=np.float64)
            if K.ndim != 2 or K.shape[0] != K.shape[1]:
                raise ProtocolError("bad_helper", "helper must be square")
            self._helper = K
            self.state["helper"] = K
            self._event("helper_upload", silo=silo_id)

    def add_embeddings(
        self,
        silo_id: int,
        member_rows: list[np.ndarray],
        labels: np.ndarray,
        row_ids: np.ndarray,
        splits: list[str],
        freq: list[str],
    ) -> None:
        """Store one silo's masked rows; the last arrival triggers matrix building."""
        with self._lock:
            if silo_id in self._uploads:
                raise ProtocolError("duplicate_upload", f"silo {silo_id} already uploaded")
            n = len(labels)
            if not all(len(m) == n for m in member_rows) or n != len(row_ids):
                raise ProtocolError("bad_upload", "row arrays must align")
            self._uploads[silo_id] = {
                "members": [np.asarray(m, dtype=np.float64) for m in member_rows],
                "labels": np.asarray(labels, dtype=np.int64),
                "row_ids": np.asarray(row_ids, dtype=np.int64),
                "splits": np.asarray(splits),
                "freq": np.asarray(freq),
            }
            self.state["masked_embeddings"][silo_id] = self._uploads[silo_id]["members"]
            self._event("embeddings_upload", silo=silo_id, rows=n)
            if len(self._uploads) == self.session.n_silos:
                if self._helper is None:
                    raise ProtocolError("missing_helper", "all uploads present but no helper")
                self._build_matrices()

    def _build_matrices(self) -> None:
        """Pool uploads in silo order and compute Gram / distance matrices."""
        silo_order = sorted(self._uploads)
        n_members = len(self._uploads[silo_order[0]]["members"])
        pooled_meta = {
            key: np.concatenate([self._uploads[s][key] for s in silo_order])
            for key in ("labels", "row_ids", "splits", "freq")
        }
        pooled_meta["silos"] = np.concatenate([
            np.full(len(self._uploads[s]["labels"]), s, dtype=np.int64) for s in silo_order
        ])
        self._row_meta = pooled_meta
        self.state["row_labels"] = pooled_meta["labels"]
        self.state["row_ids"] = pooled_meta["row_ids"]
        self.state["row_splits"] = pooled_meta["splits"]
        self.state["row_freq"] = pooled_meta["freq"]
        self.state["row_silos"] = pooled_meta["silos"]
        for m in range(n_members):
            packed = [
                flake.MaskedEmbeddings(
                    silo=s,
                    rows=self._uploads[s]["members"][m],
                    labels=self._uploads[s]["labels"],
                    row_ids=self._uploads[s]["row_ids"],
                )
                for s in silo_order
            ]
            gram = flake.compute_gram(self._helper, packed)
            dist = flake.cosine_distance_matrix(gram)
            self._member_rows.append(np.vstack([p.rows for p in packed]))
            self._member_dist.append(dist)
            self.state["gram"].append(gram.values)
            self.state["distances"].append(dist.values)
        self._ensemble_dist = flake.ensemble_distance(self._member_dist)
        self.state["ensemble_distance"] = self._ensemble_dist.values
        self._gallery_idx = np.flatnonzero(pooled_meta["splits"] == "gallery")
        if self.session.subgroup_threshold is not None:
            gal = self._gallery_idx
            sub = flake.DistanceMatrix(
                values=self._ensemble_dist.values[np.ix_(gal, gal)],
                labels=pooled_meta["labels"][gal],
                row_ids=pooled_meta["row_ids"][gal],
            )
            self._subgroups = inference.discover_subgroups(
                sub,
                self.session.subgroup_threshold,
                self.session.subgroup_min_size,
                silos=pooled_meta["silos"][gal],
            )
        self._event("matrices_ready", members=n_members, rows=len(pooled_meta["labels"]))
        self._matrices_ready.set()

    def wait_ready(self, timeout: float = _BARRIER_TIMEOUT) -> None:
        if not self._matrices_ready.wait(timeout):
            raise SessionAborted("timed out waiting for distance matrices")
        if self._aborted:
            raise SessionAborted(self._aborted)

    # -- results (read by the orchestrator and by query handling) -----------

    @property
    def ensemble_distance_matrix(self) -> flake.DistanceMatrix:
        if self._ensemble_dist is None:
            raise RuntimeError("distance matrices not built yet")
        return self._ensemble_dist

    @property
    def row_meta(self) -> dict[str, np.ndarray]:
        return self._row_meta

    @property
    def subgroups(self) -> list[dict]:
        return self._subgroups

    def evaluation_reports(self, seed: int | None = None) -> dict[str, inference.EvalReport]:
        D = self.ensemble_distance_matrix
        return inference.evaluate_all_settings(
            D, self._row_meta["splits"], self._row_meta["freq"],
            k_list=tuple(self.session.k_list), seed=seed,
        )

    def cluster_report(self) -> dict[str, tuple[float, float]]:
        """Intra/inter distances over test rows and over rare gallery rows."""
        D = self.ensemble_distance_matrix
        splits = self._row_meta["splits"]
        freq = self._row_meta["freq"]
        out = {}
        out["test"] = inference.cluster_metrics(D, np.flatnonzero(splits == "test"))
        rare_gal = np.flatnonzero((splits == "gallery") & (freq == "rare"))
        out["rare_gallery"] = inference.cluster_metrics(D, rare_gal)
        return out

    def handle_query(self, member_rows: list[np.ndarray], k: int) -> list[list]:
        """Rank gallery syndromes for masked query rows, fused over members."""
        self.wait_ready()
        if k < 1:
            raise ProtocolError("bad_query", "k must be >= 1")
        if len(member_rows) != len(self._member_rows):
            raise ProtocolError(
                "bad_query",
                f"expected {len(self._member_rows)} member matrices, got {len(member_rows)}",
            )
        gal = self._gallery_idx
        labels = self._row_meta["labels"][gal]
        n_query = len(member_rows[0])
        member_D = []
        for m, q in enumerate(member_rows):
            q = np.atleast_2d(np.asarray(q, dtype=np.float64))
            if q.shape[1] != self._helper.shape[0]:
                raise ProtocolError("dim_mismatch", "query width differs from helper")
            gallery_rows = self._member_rows[m][gal]
            block, qdiag = flake.cross_gram(self._helper, q, gallery_rows)
            if (qdiag <= 0).any():
                raise ProtocolError("bad_query", "zero-norm query row")
            gdiag = np.diag(self.state["gram"][m])[gal]
            member_D.append(1.0 - block / np.outer(np.sqrt(qdiag), np.sqrt(gdiag)))
        fused = np.mean(member_D, axis=0)
        results = []
        for i in range(n_query):
            ranked = inference.rank_distinct_syndromes(fused[i], labels, k)
            results.append([[int(s), float(d)] for s, d in ranked])
        return results

    def observable_state(self) -> dict:
        """Everything the aggregator ever stored; the blindness tests scan this."""
        return self.state


class AggregatorServer:
    """Connection handling on top of an Aggregator, one handler per connection."""

    def __init__(self, aggregator: Aggregator):
        self.agg = aggregator
        self.threads: list[threading.Thread] = []
        self._tcp_server: "object | None" = None

    # -- handler ------------------------------------------------------------

    def _check_envelope(self, msg: dict) -> None:
        if msg.get("protocol_version") != PROTOCOL_VERSION:
            raise ProtocolError(
                "protocol_version_mismatch",
                f"expected {PROTOCOL_VERSION}, got {msg.get('protocol_version')}",
            )
        if msg.get("session_id") != self.agg.session.session_id:
            raise ProtocolError("wrong_session", f"unknown session {msg.get('session_id')}")

    def serve_connection(self, conn: Connection) -> None:
        session = self.agg.session
        silo_id = None
        try:
            hello = conn.recv()
            try:
                if hello.get("type") != "hello":
                    raise ProtocolError("expected_hello", f"got {hello.get('type')}")
                self._check_envelope(hello)
                silo_id = int(hello["silo_id"])
                role = hello.get("role", "trainer")
                self.agg.register(silo_id, role)
            except ProtocolError as exc:
                conn.send(error_msg(session.session_id, exc.code, exc.detail))
                conn.close()
                return
            conn.send({
                "type": "hello",
                "protocol_version": PROTOCOL_VERSION,
                "session_id": session.session_id,
                "silo_id": silo_id,
                "n_silos": session.n_silos,
                "rounds": session.rounds,
            })
            if role == "trainer":
                self._run_training_phase(conn, silo_id)
                self._run_upload_phase(conn, silo_id)
            self.agg.wait_ready()
            self._notify_subgroups(conn, silo_id)
            self._serve_queries(conn, silo_id)
        except (ConnectionClosed, OSError):
            pass
        except SessionAborted as exc:
            try:
                conn.send(error_msg(session.session_id, "aborted", str(exc)))
            except Exception:
                pass
        finally:
            conn.close()

    def _run_training_phase(self, conn: Connection, silo_id: int) -> None:
        session = self.agg.session
        for round_ in range(session.rounds):
            conn.send({
                "type": "round_start",
                "protocol_version": PROTOCOL_VERSION,
                "session_id": session.session_id,
                "round": round_,
            })
            while True:
                msg = conn.recv()
                try:
                    self._check_envelope(msg)
                    if msg.get("type") != "masked_model":
                        raise ProtocolError(
                            "unexpected_type",
                            f"expected masked_model, got {msg.get('type')}",
                        )
                    if int(msg["round"]) != round_:
                        code = ("duplicate_submission"
                                if int(msg["round"]) < round_ else "wrong_round")
                        raise ProtocolError(
                            code,
                            f"got round {msg['round']} while serving round {round_}; "
                            "first submission kept",
                        )
                    frame = self.agg.submit_masked(
                        silo_id, round_, array_from_wire(msg["words"])
                    )
                    break
                except ProtocolError as exc:
                    conn.send(error_msg(session.session_id, exc.code, exc.detail))
            conn.send_bytes(frame)

    def _run_upload_phase(self, conn: Connection, silo_id: int) -> None:
        session = self.agg.session
        done = False
        while not done:
            msg = conn.recv()
            try:
                self._check_envelope(msg)
                kind = msg.get("type")
                if kind == "masked_model":
                    raise ProtocolError(
                        "duplicate_submission",
                        f"round {msg.get('round')} already aggregated; first submission kept",
                    )
                if kind == "helper_upload":
                    self.agg.set_helper(silo_id, array_from_wire(msg["helper"]))
                elif kind == "embeddings_upload":
                    self.agg.add_embeddings(
                        silo_id,
                        [array_from_wire(m) for m in msg["members"]],
                        np.asarray(msg["labels"], dtype=np.int64),
                        np.asarray(msg["row_ids"], dtype=np.int64),
                        list(msg["splits"]),
                        list(msg["freq"]),
                    )
                    done = True
                else:
                    raise ProtocolError(
                        "unexpected_type", f"expected uploads, got {kind}"
                    )
            except ProtocolError as exc:
                conn.send(error_msg(session.session_id, exc.code, exc.detail))

    def _notify_subgroups(self, conn: Connection, silo_id: int) -> None:
        involved = [g for g in self.agg.subgroups if silo_id in g.get("silos", [])]
        if involved:
            conn.send({
                "type": "subgroup_notice",
                "protocol_version": PROTOCOL_VERSION,
                "session_id": self.agg.session.session_id,
                "groups": involved,
            })

    def _serve_queries(self, conn: Connection, silo_id: int) -> None:
        session = self.agg.session
        while True:
            msg = conn.recv()
            try:
                self._check_envelope(msg)
                if msg.get("type") != "query":
                    raise ProtocolError("unexpected_type", f"got {msg.get('type')}")
                results = self.agg.handle_query(
                    [array_from_wire(m) for m in msg["members"]], int(msg["k"])
                )
                conn.send({
                    "type": "query_response",
                    "protocol_version": PROTOCOL_VERSION,
                    "session_id": session.session_id,
                    "results": results,
                })
            except ProtocolError as exc:
                conn.send(error_msg(session.session_id, exc.code, exc.detail))

    # -- wiring -------------------------------------------------------------

    def spawn(self, conn: Connection) -> threading.Thread:
        t = threading.Thread(target=self.serve_connection, args=(conn,), daemon=True)
        t.start()
        self.threads.append(t)
        return t

    def listen_tcp(self, host: str = "127.0.0.1", port: int = 0):
        """Bind and accept in a background thread; returns (host, actual_port)."""
        import socket

        srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        srv.bind((host, port))
        srv.listen()
        self._tcp_server = srv

        def accept_loop():
            from .transport import TcpConn

            while True:
                try:
                    sock, _ = srv.accept()
                except OSError:
                    return
                sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                self.spawn(TcpConn(sock))

        t = threading.Thread(target=accept_loop, daemon=True)
        t.start()
        return srv.getsockname()

    def close(self) -> None:
        if self._tcp_server is not None:
            try:
                self._tcp_server.close()
            except OSError:
                pass

    def join(self, timeout: float = _BARRIER_TIMEOUT) -> None:
        for t in self.threads:
            t.join(timeout)
