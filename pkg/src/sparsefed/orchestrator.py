"""Two-stage federated training: compression rounds, then masked fine-tuning.

Clients and server only exchange round-tagged ``Message`` objects through a
``Transport``. Client data stays inside ``Client``; the server side of this
module never touches ``ClientDataset.windows``.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import Executor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Protocol, Sequence

import numpy as np

from .autoencoder import (
    LayerSpec,
    ParameterVector,
    ProximalConfig,
    SparsityMask,
    batch_loss,
    init_model,
    sgd,
)
from .data import ClientDataset, current_actor
from .fusion import FusionConfig, admm_sparse_fuse, compression_rate, extract_mask, masked_average_fuse

logger = logging.getLogger(__name__)

COMPRESSION = "compression"
FINETUNE = "finetune"
_STAGE_CODES = {COMPRESSION: 0, FINETUNE: 1}


class ProtocolError(RuntimeError):
    pass


@dataclass(frozen=True)
class RoundSchedule:
    compression_rounds: int
    finetune_rounds: int = 0
    compression_rate_target: float = 0.0

    def __post_init__(self) -> None:
        if self.compression_rounds < 1 or self.finetune_rounds < 0:
            raise ValueError("need compression_rounds >= 1 and finetune_rounds >= 0")
        if not 0.0 <= self.compression_rate_target <= 1.0:
            raise ValueError("compression_rate_target must be in [0, 1]")


@dataclass
class RoundRecord:
    round: int
    stage: str
    compression_rate: float
    client_losses: list[float]
    val_loss: float
    admm_iterations: int = 0
    admm_converged: bool = True


@dataclass(frozen=True)
class Message:
    stage: str
    round: int
    sender: str
    model: ParameterVector


def client_seed(seed: int, client_id: int, round_index: int, stage: str) -> int:
    """Independent, reproducible seed per (run seed, client, round, stage)."""
    ss = np.random.SeedSequence([seed, client_id, round_index, _STAGE_CODES[stage]])
    return int(ss.generate_state(1)[0])


class Transport(Protocol):
    def broadcast(self, message: Message) -> None: ...

    def fetch_global(self, client_id: int, stage: str, round_index: int) -> Message: ...

    def upload(self, message: Message) -> None: ...

    def gather(self, stage: str, round_index: int, n_clients: int) -> list[Message]: ...


class InProcessTransport:
    """Mailbox transport between server and clients living in one process.

    With ``keep_history`` every message ever sent is retained in ``history``.
    """

    def __init__(self, keep_history: bool = False):
        self._global: Optional[Message] = None
        self._inbox: list[Message] = []
        self.keep_history = keep_history
        self.history: list[Message] = []

    def broadcast(self, message: Message) -> None:
        self._global = _snapshot(message)
        self._inbox = []
        if self.keep_history:
            self.history.append(self._global)

    def fetch_global(self, client_id: int, stage: str, round_index: int) -> Message:
        msg = self._global
        if msg is None or (msg.stage, msg.round) != (stage, round_index):
            raise ProtocolError(f"client {client_id} expected global model for {stage} round {round_index}")
        return msg

    def upload(self, message: Message) -> None:
        snap = _snapshot(message)
        # list.append is atomic under the GIL
        self._inbox.append(snap)
        if self.keep_history:
            self.history.append(snap)

    def gather(self, stage: str, round_index: int, n_clients: int) -> list[Message]:
        msgs = [m for m in self._inbox if (m.stage, m.round) == (stage, round_index)]
        stale = len(self._inbox) - len(msgs)
        if stale or len(msgs) != n_clients:
            raise ProtocolError(
                f"{stage} round {round_index}: got {len(msgs)} models for {n_clients} clients ({stale} mistagged)")
        senders = [m.sender for m in msgs]
        if len(set(senders)) != len(senders):
            raise ProtocolError(f"{stage} round {round_index}: duplicate uploads from {senders}")
        return sorted(msgs, key=lambda m: int(m.sender.split("-")[1]))


def _snapshot(message: Message) -> Message:
    flat = message.model.flat.copy()
    flat.setflags(write=False)
    return Message(message.stage, message.round, message.sender, ParameterVector(flat, message.model.shape_meta))


class Client:
    """An edge device: owns its dataset and trains locally on request."""

    def __init__(self, data: ClientDataset, cfg: ProximalConfig):
        self._data = data
        self.cfg = cfg
        self.client_id = data.client_id
        self.name = f"client-{data.client_id}"

    @property
    def input_dim(self) -> int:
        return self._data.input_dim

    def _as_self(self, fn, *args):
        token = current_actor.set(self.name)
        try:
            return fn(*args)
        finally:
            current_actor.reset(token)

    def run_round(self, transport: Transport, stage: str, round_index: int, seed: int,
                  grad_mask: Optional[SparsityMask] = None) -> float:
        """Pull the global model, train, upload; returns the last-epoch training loss."""
        return self._as_self(self._run_round, transport, stage, round_index, seed, grad_mask)

    def _run_round(self, transport, stage, round_index, seed, grad_mask):
        glob = transport.fetch_global(self.client_id, stage, round_index).model
        windows, masks = self._data.select("train")
        try:
            local, history = sgd(glob, windows, masks, glob, self.cfg, grad_mask,
                                 client_seed(seed, self.client_id, round_index, stage))
        except Exception as exc:
            raise RuntimeError(f"{self.name} failed in {stage} round {round_index}: {exc}") from exc
        transport.upload(Message(stage, round_index, self.name, local))
        return history[-1]

    def validation_loss(self, model: ParameterVector) -> float:
        return self._as_self(self._validation_loss, model)

    def _validation_loss(self, model):
        windows, masks = self._data.select("val")
        return batch_loss(model, windows, masks)

    def evaluate(self, fn: Callable[[ParameterVector, ClientDataset], object], model: ParameterVector):
        """Run an evaluation function against the local data, on the client side."""
        return self._as_self(fn, model, self._data)


@dataclass
class FederationTopology:
    clients: list[ClientDataset]
    layers: LayerSpec
    scheme: str = "univariate"
    configs: list[ProximalConfig] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.clients:
            raise ValueError("a federation needs at least one client")
        if not self.configs:
            self.configs = [ProximalConfig()] * len(self.clients)
        if len(self.configs) != len(self.clients):
            raise ValueError("one ProximalConfig per client is required")
        dims = {c.input_dim for c in self.clients}
        if len(dims) != 1:
            raise ValueError(f"clients disagree on model input size: {sorted(dims)}")

    @property
    def input_dim(self) -> int:
        return self.clients[0].input_dim

    def make_clients(self) -> list[Client]:
        return [Client(d, cfg) for d, cfg in zip(self.clients, self.configs)]


RoundCallback = Callable[[RoundRecord, ParameterVector, Optional[SparsityMask]], None]


def _map(executor: Optional[Executor], fn, items):
    if executor is None:
        return [fn(x) for x in items]
    return list(executor.map(fn, items))


def _run_rounds(
    clients: Sequence[Client],
    global_model: ParameterVector,
    stage: str,
    rounds: range,
    seed: int,
    fuse: Callable[[list[ParameterVector]], tuple[ParameterVector, int, bool]],
    grad_mask: Optional[SparsityMask],
    transport: Transport,
    executor: Optional[Executor],
    on_round: Optional[RoundCallback],
) -> tuple[ParameterVector, list[RoundRecord]]:
    records = []
    for r in rounds:
        transport.broadcast(Message(stage, r, "server", global_model))
        losses = _map(executor, lambda c: c.run_round(transport, stage, r, seed, grad_mask), clients)
        uploads = transport.gather(stage, r, len(clients))
        global_model, iters, converged = fuse([m.model for m in uploads])
        val = _map(executor, lambda c: c.validation_loss(global_model), clients)
        rec = RoundRecord(
            round=r,
            stage=stage,
            compression_rate=compression_rate(global_model),
            client_losses=[float(v) for v in losses],
            val_loss=float(np.mean(val)),
            admm_iterations=iters,
            admm_converged=converged,
        )
        logger.info("%s round %d: rate %.4f, train loss %.5f, val loss %.5f",
                    stage, r, rec.compression_rate, np.mean(losses), rec.val_loss)
        records.append(rec)
        if on_round is not None:
            on_round(rec, global_model, grad_mask)
    return global_model, records


def initial_global_model(topology: FederationTopology, seed: int) -> ParameterVector:
    return init_model(topology.input_dim, topology.layers, seed)


def run_compression_stage(
    topology: FederationTopology,
    schedule: RoundSchedule,
    fusion_cfg: FusionConfig,
    seed: int,
    initial: Optional[ParameterVector] = None,
    start_round: int = 1,
    transport: Optional[Transport] = None,
    executor: Optional[Executor] = None,
    on_round: Optional[RoundCallback] = None,
) -> tuple[ParameterVector, list[RoundRecord]]:
    """Rounds ``start_round..M`` of proximal local training followed by ADMM fusion."""
    model = initial if initial is not None else initial_global_model(topology, seed)

    def fuse(models):
        res = admm_sparse_fuse(models, fusion_cfg)
        return res.model, res.iterations, res.converged

    return _run_rounds(topology.make_clients(), model, COMPRESSION,
                       range(start_round, schedule.compression_rounds + 1), seed, fuse, None,
                       transport or InProcessTransport(), executor, on_round)


def run_finetune_stage(
    topology: FederationTopology,
    global_model: ParameterVector,
    schedule: RoundSchedule,
    seed: int,
    zero_tol: float = 0.0,
    start_round: int = 1,
    mask: Optional[SparsityMask] = None,
    transport: Optional[Transport] = None,
    executor: Optional[Executor] = None,
    on_round: Optional[RoundCallback] = None,
) -> tuple[ParameterVector, list[RoundRecord]]:
    """Rounds ``start_round..J`` of masked local training and masked averaging.

    The mask defaults to the support of ``global_model``, so zeros stay zero.
    """
    if mask is None:
        mask = extract_mask(global_model, zero_tol)

    def fuse(models):
        return masked_average_fuse(models, mask), 0, True

    return _run_rounds(topology.make_clients(), global_model, FINETUNE,
                       range(start_round, schedule.finetune_rounds + 1), seed, fuse, mask,
                       transport or InProcessTransport(), executor, on_round)


class Checkpointer:
    """Writes global model, mask and round ledger after every round."""

    def __init__(self, directory):
        self.directory = Path(directory)

    def __call__(self, record: RoundRecord, model: ParameterVector, mask: Optional[SparsityMask],
                 history: Sequence[RoundRecord]) -> None:
        self.directory.mkdir(parents=True, exist_ok=True)
        model.save(self.directory / "global.bin")
        if mask is not None:
            np.save(self.directory / "mask.npy", mask.bits)
        state = {"stage": record.stage, "round": record.round, "records": [asdict(r) for r in history]}
        tmp = self.directory / "state.json.tmp"
        tmp.write_text(json.dumps(state))
        tmp.replace(self.directory / "state.json")

    def load(self) -> Optional[tuple[str, int, ParameterVector, list[RoundRecord]]]:
        state_path = self.directory / "state.json"
        if not state_path.exists():
            return None
        state = json.loads(state_path.read_text())
        model = ParameterVector.load(self.directory / "global.bin")
        records = [RoundRecord(**r) for r in state["records"]]
        return state["stage"], state["round"], model, records
