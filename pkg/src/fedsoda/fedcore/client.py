"""Client state, local training, evaluation, and the frame-driven client loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .. import ftns
from ..config import ExperimentConfig
from ..data import ClientDataset, dice, pixel_accuracy
from ..model import LayeredModel, decode_params, encode_params, params_load
from ..tensor import AdamState, ParamBlock, adam_step, loss_bce_weighted
from ..transport import ChannelClosed, Endpoint, Frame, MsgType, json_payload
from .synthetic import SyntheticBank, bank_update, gen_synthetic, loss_sc

log = logging.getLogger(__name__)

# sub-stream tags so training randomness is independent of probe generation
_TRAIN_STREAM = 1
_SYNTH_STREAM = 2


@dataclass
class ClientState:
    client_id: int
    model: LayeredModel
    optimizer: AdamState
    dataset: ClientDataset
    config: ExperimentConfig
    bank: SyntheticBank = None

    def __post_init__(self):
        if self.dataset.n_train < 1:
            raise ValueError(f"client {self.client_id}: empty training set")
        if self.bank is None:
            self.bank = SyntheticBank(self.client_id, stats=self.dataset.stats)

    @property
    def keeps_local_norm(self) -> bool:
        return self.config.method == "fedbn"

    @property
    def uses_lsc(self) -> bool:
        return self.config.method == "fedsoda" and self.config.lsc

    @property
    def uploads_synthetic(self) -> bool:
        return self.config.method == "fedsoda" and self.config.so


def make_client(dataset: ClientDataset, model: LayeredModel, config: ExperimentConfig) -> ClientState:
    opt = AdamState(lr=config.lr, beta1=config.beta1, beta2=config.beta2)
    return ClientState(dataset.client_id, model, opt, dataset, config)


def _rng(config: ExperimentConfig, client_id: int, round_index: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([config.seed, client_id, round_index, stream])


def local_train(client: ClientState, global_params: list[ParamBlock], epochs: int, method: str,
                round_index: int = 1) -> tuple[list[ParamBlock], dict]:
    """Load the global model, then run ``epochs`` passes of mini-batch Adam.

    The loss is BCE, plus ``alpha_sc * L_sc`` when the consistency loss is on,
    plus ``prox_mu / 2 * ||p - w||^2`` under FedProx.
    """
    cfg = client.config
    model = client.model
    params_load(model, global_params, skip_norm=method == "fedbn")
    anchor = [(b.weights.copy(), b.bias.copy()) for b in model.blocks] if method == "fedprox" else None
    use_lsc = method == "fedsoda" and cfg.lsc
    rng = _rng(cfg, client.client_id, round_index, _TRAIN_STREAM)
    x_all, y_all = client.dataset.train_images, client.dataset.train_masks
    n = len(x_all)
    ce_sum = sc_sum = 0.0
    steps = 0
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            x, y = x_all[idx], y_all[idx]
            _, y_hat = model.forward_with_taps(x, training=True)
            l_ce, grad = loss_bce_weighted(y, y_hat)
            if use_lsc:
                l_sc, g_sc = loss_sc(y, y_hat, cfg.epsilon)
                grad = grad + cfg.alpha_sc * g_sc
                sc_sum += l_sc
            model.backward(grad)
            if anchor is not None:
                for b, (w0, b0) in zip(model.blocks, anchor):
                    b.grad_weights += cfg.prox_mu * (b.weights - w0)
                    b.grad_bias += cfg.prox_mu * (b.bias - b0)
            adam_step(model.blocks, client.optimizer)
            ce_sum += l_ce
            steps += 1
    metrics = {"loss_ce": ce_sum / steps if steps else 0.0, "loss_sc": sc_sum / steps if steps else 0.0, "steps": steps}
    return model.blocks, metrics


def evaluate(model: LayeredModel, images: np.ndarray, masks: np.ndarray, epsilon: float) -> dict:
    """Mean per-image Dice, pixel accuracy, and eval-split BCE / consistency loss."""
    _, y_hat = model.forward_with_taps(images, training=False)
    pred = (y_hat >= 0.5).astype(masks.dtype)
    dices = [dice(masks[i], pred[i]) for i in range(len(masks))]
    l_ce, _ = loss_bce_weighted(masks, y_hat)
    l_sc, _ = loss_sc(masks, y_hat, epsilon)
    return {
        "dice": float(np.mean(dices)),
        "accuracy": pixel_accuracy(masks, pred),
        "loss_ce": l_ce,
        "loss_sc": l_sc,
    }


def evaluate_client(client: ClientState) -> dict:
    ds = client.dataset
    images, masks = (ds.eval_images, ds.eval_masks) if len(ds.eval_images) else (ds.train_images, ds.train_masks)
    return evaluate(client.model, images, masks, client.config.epsilon)


def refresh_bank(client: ClientState, round_index: int) -> SyntheticBank:
    cfg = client.config
    shape = client.dataset.train_images.shape[1:]
    v = gen_synthetic(client.dataset.stats, shape, cfg.synth_batch, _rng(cfg, client.client_id, round_index, _SYNTH_STREAM))
    return bank_update(client.bank, v, cfg.gamma)


@dataclass
class ClientWorker:
    """Drives one client from frames arriving on its endpoint.

    On ``GLOBAL_MODEL`` for round t the client loads the model, reports its
    evaluation for round t, and, while t < rounds, trains round t+1 and
    uploads its probe bank (when cross-assessment is on) and parameters.
    """

    client: ClientState
    endpoint: Endpoint
    rounds: int
    error: BaseException | None = field(default=None, init=False)

    def register_payload(self) -> bytes:
        ds = self.client.dataset
        return json_payload({
            "client_id": self.client.client_id,
            "n_train": ds.n_train,
            "n_eval": int(len(ds.eval_images)),
            "image_shape": list(ds.train_images.shape[1:]),
            "stats": ds.stats.to_dict(),
        })

    def run(self) -> None:
        c = self.client
        cid = c.client_id
        try:
            self.endpoint.send(Frame(MsgType.REGISTER, 0, cid, self.register_payload()))
            while True:
                frame = self.endpoint.recv(timeout=c.config.round_timeout)
                if frame.msg_type == MsgType.SHUTDOWN:
                    break
                if frame.msg_type != MsgType.GLOBAL_MODEL:
                    raise RuntimeError(f"client {cid}: unexpected {frame.msg_type.name} frame")
                t = frame.round
                blocks, _ = decode_params(frame.payload)
                params_load(c.model, blocks, skip_norm=c.keeps_local_norm and t > 0)
                self.endpoint.send(Frame(MsgType.METRICS_REPORT, t, cid, json_payload(evaluate_client(c))))
                if t >= self.rounds:
                    continue
                nxt = t + 1
                if c.uploads_synthetic:
                    bank = refresh_bank(c, nxt)
                    self.endpoint.send(Frame(MsgType.SYNTHETIC_UPLOAD, nxt, cid, ftns.dumps(bank.v)))
                params, _ = local_train(c, blocks, c.config.local_epochs, c.config.method, nxt)
                self.endpoint.send(Frame(MsgType.MODEL_UPDATE, nxt, cid, encode_params(params)))
        except ChannelClosed:
            log.debug("client %d: channel closed", cid)
        except BaseException as exc:  # surfaced to the server via the closed channel
            self.error = exc
            log.error("client %d failed: %s", cid, exc)
        finally:
            self.endpoint.close()
