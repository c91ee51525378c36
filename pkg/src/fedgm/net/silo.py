"""Silo-side protocol client: train, mask, submit, unmask, upload, query.

On connection loss mid-protocol the client aborts and, when a state
directory is configured, writes a resumable state file (round counter plus a
checkpoint of the current ensemble) before re-raising.

A training silo executes the full cycle: identical seeded init, E local
epochs per round, fixed-point encoding, non-zero-sum masking, submission,
and unmasking of the broadcast masked sum.  After training it embeds its
gallery and test rows with every ensemble member, masks them with its own
left inverse, and uploads the masked rows (labels travel in plaintext, as
they are not considered private).

A query-only client performs the onboarding path: it never trains, and only
needs the final ensemble and the shared seed to mask queries compatibly.
Left inverses are derived from the shared seed under a silo-specific label
for reproducibility; a deployment would use local private randomness, which
changes nothing for the aggregator, who knows neither.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .. import flake
from ..core import ParamVec, RingVec, decode_fixed, derive_rng, encode_fixed
from ..data import PatientRecord, frequency_by_class
from ..model import (
    EncoderConfig,
    EnsembleModel,
    ensemble_embed,
    flatten_ensemble,
    init_ensemble,
    train_local,
    unflatten_ensemble,
)
from ..secagg import gen_round_masks, mask_local, unmask_global
from .aggregator import SessionConfig
from .framing import PROTOCOL_VERSION, array_from_wire, array_to_wire
from .transport import Connection


class SiloProtocolError(RuntimeError):
    pass


@dataclass
class TrainingPlan:
    """Everything a training silo needs beyond the shared session parameters."""

    model: EncoderConfig
    n_members: int = 2
    epochs_per_round: int = 1
    lr: float = 0.05
    batch_size: int = 32
    flake_extra_dims: int = 16


@dataclass
class SiloResult:
    ensemble: EnsembleModel
    final_params: ParamVec
    uploaded_ids: np.ndarray
    plain_embeddings: list[np.ndarray]  # per member, silo-side ground truth


def _expect(msg: dict, kind: str) -> dict:
    if msg.get("type") == "error":
        raise SiloProtocolError(f"aggregator error {msg.get('code')}: {msg.get('detail')}")
    if msg.get("type") != kind:
        raise SiloProtocolError(f"expected {kind}, got {msg.get('type')}")
    return msg


class SiloClient:
    def __init__(
        self,
        session: SessionConfig,
        plan: TrainingPlan,
        silo_index: int,
        shared_seed: int,
        records: list[PatientRecord],
        all_records: list[PatientRecord],
        record_history: bool = False,
        state_dir: str | None = None,
    ):
        if not 1 <= silo_index <= session.n_silos:
            raise ValueError(f"silo index {silo_index} outside 1..{session.n_silos}")
        # opt-in: keep per-round plaintext parameter snapshots (test ground truth)
        self.record_history = record_history
        self.param_history: list[np.ndarray] = []
        self.state_dir = state_dir
        self._round = 0
        self.session = session
        self.plan = plan
        self.silo_index = silo_index
        self.shared_seed = shared_seed
        self.records = records
        self._freq = frequency_by_class(all_records)
        self.train_records = [r for r in records if r.split == "train"]
        self._train_feats = np.array([r.features for r in self.train_records])
        self._train_labels = np.array([r.syndrome for r in self.train_records])
        self.upload_records = sorted(
            (r for r in records if r.split in ("gallery", "test")), key=lambda r: r.id
        )
        self.ensemble: EnsembleModel | None = None
        self._train_rngs = [
            derive_rng(shared_seed, f"train/silo={silo_index}/member={m}")
            for m in range(plan.n_members)
        ]
        self._left_inverse: flake.LeftInverse | None = None
        self._common: flake.CommonMask | None = None
        self.result: SiloResult | None = None

    # -- protocol steps ------------------------------------------------------

    def _envelope(self, kind: str, **body) -> dict:
        return {
            "type": kind,
            "protocol_version": PROTOCOL_VERSION,
            "session_id": self.session.session_id,
            "silo_id": self.silo_index,
            **body,
        }

    def hello(self, conn: Connection, role: str = "trainer") -> None:
        conn.send(self._envelope("hello", role=role))
        _expect(conn.recv(), "hello")

    def _train_round(self) -> None:
        feats = self._train_feats
        labels = self._train_labels
        members = []
        for m, (cfg, params) in enumerate(self.ensemble.members):
            params = train_local(
                params, cfg, feats, labels,
                epochs=self.plan.epochs_per_round,
                lr=self.plan.lr,
                batch_size=self.plan.batch_size,
                rng=self._train_rngs[m],
            )
            members.append((cfg, params))
        self.ensemble = EnsembleModel(tuple(members))

    def dump_state(self) -> str | None:
        """Write the resumable state file; returns its path (None if disabled)."""
        if self.state_dir is None or self.ensemble is None:
            return None
        os.makedirs(self.state_dir, exist_ok=True)
        from ..model import save_checkpoint

        stem = os.path.join(self.state_dir, f"silo-{self.silo_index}-state")
        save_checkpoint(stem + ".ckpt", flatten_ensemble(self.ensemble))
        with open(stem + ".json", "w", encoding="utf-8") as fh:
            json.dump({
                "session_id": self.session.session_id,
                "silo_index": self.silo_index,
                "next_round": self._round,
                "rounds": self.session.rounds,
                "checkpoint": stem + ".ckpt",
            }, fh, indent=2)
        return stem + ".json"

    def run_training(self, conn: Connection) -> None:
        """The federated cycle: train E epochs, mask, submit, unmask, repeat."""
        if not self.train_records:
            raise SiloProtocolError(f"silo {self.silo_index} has an empty train split")
        self.ensemble = init_ensemble(
            self.plan.model, self.plan.n_members, derive_rng(self.shared_seed, "init")
        )
        n = self.session.n_silos
        try:
            self._training_rounds(conn, n)
        except ConnectionError:
            state = self.dump_state()
            detail = f"; resumable state written to {state}" if state else ""
            raise SiloProtocolError(
                f"connection lost in round {self._round}{detail}"
            ) from None

    def _training_rounds(self, conn: Connection, n: int) -> None:
        for round_ in range(self.session.rounds):
            self._round = round_
            start = _expect(conn.recv(), "round_start")
            if start["round"] != round_:
                raise SiloProtocolError(f"round_start {start['round']}, expected {round_}")
            self._train_round()
            flat = flatten_ensemble(self.ensemble)
            if self.record_history:
                self.param_history.append(flat.values.copy())
            ring = encode_fixed(flat, self.session.scale_bits)
            if n > 1:
                rm = gen_round_masks(
                    self.shared_seed, round_, n, ring.size, self.session.scale_bits
                )
                submit = mask_local(ring, self.silo_index, rm).words
            else:
                # Masking needs a second participant; an N=1 "federation" is the
                # degenerate baseline and submits the encoded words directly.
                submit = ring
            conn.send(self._envelope(
                "masked_model", round=round_, words=array_to_wire(submit.words)
            ))
            reply = _expect(conn.recv(), "masked_global")
            if reply["round"] != round_:
                raise SiloProtocolError(f"masked_global for round {reply['round']}")
            masked_sum = RingVec(
                array_from_wire(reply["words"]), self.session.scale_bits, flat.layout
            )
            if n > 1:
                global_flat = unmask_global(masked_sum, rm, n)
            else:
                global_flat = decode_fixed(masked_sum, divisor=1)
            self.ensemble = unflatten_ensemble(
                ParamVec(global_flat.values, flat.layout), self.ensemble
            )

    def _ensure_masking(self) -> None:
        if self._common is None:
            self._common = flake.gen_common_mask(
                self.shared_seed,
                self.plan.model.embed_dim,
                self.plan.model.embed_dim + self.plan.flake_extra_dims,
            )
            self._left_inverse = flake.sample_left_inverse(
                self._common,
                derive_rng(self.shared_seed, f"flake/left-inverse/silo={self.silo_index}"),
            )

    def upload_embeddings(self, conn: Connection) -> SiloResult:
        """Mask gallery+test latents per member and ship them; silo 1 ships K first."""
        self._ensure_masking()
        rows = self.upload_records
        feats = np.array([r.features for r in rows])
        labels = np.array([r.syndrome for r in rows], dtype=np.int64)
        ids = np.array([r.id for r in rows], dtype=np.int64)
        splits = [r.split for r in rows]
        freq = [self._freq[r.syndrome].value for r in rows]
        plain = ensemble_embed(self.ensemble, feats)
        masked = [
            flake.mask_embeddings(Z, self._left_inverse, labels, ids, self.silo_index)
            for Z in plain
        ]
        if self.silo_index == 1:
            conn.send(self._envelope("helper_upload", helper=array_to_wire(self._common.K)))
        conn.send(self._envelope(
            "embeddings_upload",
            members=[array_to_wire(me.rows) for me in masked],
            labels=[int(v) for v in labels],
            row_ids=[int(v) for v in ids],
            splits=splits,
            freq=freq,
        ))
        self.result = SiloResult(
            ensemble=self.ensemble,
            final_params=flatten_ensemble(self.ensemble),
            uploaded_ids=ids,
            plain_embeddings=plain,
        )
        return self.result

    def query(self, conn: Connection, features: np.ndarray, k: int) -> list[list]:
        """Embed, mask, and rank a query patient against the gallery."""
        self._ensure_masking()
        if self.ensemble is None:
            raise SiloProtocolError("no ensemble model available for queries")
        feats = np.atleast_2d(np.asarray(features, dtype=np.float64))
        dummy = np.zeros(len(feats), dtype=np.int64)
        members = [
            flake.mask_embeddings(Z, self._left_inverse, dummy, dummy, self.silo_index).rows
            for Z in ensemble_embed(self.ensemble, feats)
        ]
        conn.send(self._envelope(
            "query", members=[array_to_wire(m) for m in members], k=int(k)
        ))
        reply = _expect(conn.recv(), "query_response")
        return reply["results"]

    def run(self, conn: Connection) -> SiloResult:
        """Full trainer flow over an established connection."""
        self.hello(conn, role="trainer")
        self.run_training(conn)
        return self.upload_embeddings(conn)


class QueryClient(SiloClient):
    """Late-joining silo: adopts the final ensemble and shared seed, never trains.

    Uses its own silo id (outside the trainer range) and its own left inverse;
    rankings still match any founding silo's because the Gram matrix is
    invariant to which valid left inverse masked the query.
    """

    def __init__(
        self,
        session: SessionConfig,
        plan: TrainingPlan,
        silo_id: int,
        shared_seed: int,
        ensemble: EnsembleModel,
    ):
        self.session = session
        self.plan = plan
        self.silo_index = silo_id
        self.shared_seed = shared_seed
        self.ensemble = ensemble
        self._left_inverse = None
        self._common = None

    def onboard(self, conn: Connection) -> None:
        self.hello(conn, role="query")
