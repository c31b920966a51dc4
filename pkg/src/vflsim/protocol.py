"""Round orchestration for the training algorithms.

All algorithms run through one superstep engine; they differ in how the
exchanged client representations are maintained and where gradients are
assembled:

  svfl            exact exchange; every machine sees fresh batch rows
  efvfl           error feedback: receivers accumulate compressed deltas into
                  a surrogate bank; deltas are computed at the post-update
                  point and broadcast at the end of the round
  cvfl            direct compression: compressed batch rows are substituted
                  into a cache at the start of the round; no memory
  efvfl_private / cvfl_private
                  labels stay at the server, which computes every machine's
                  fusion partial from the surrogates alone and sends each
                  client its slice; clients chain through their local maps

Non-identity compressors act on the rows of the current batch (the message
is batch-sized); the identity exchanges full matrices, which keeps the bank
exactly in sync and makes svfl/efvfl/cvfl coincide under identity.

Machines are simulated in-process.  A round is barrier-synchronized: the
per-machine compute phases are pure and may run on a thread pool, and shared
state (parameters, surrogate bank) is only written by the orchestrator after
all results are collected, so results are identical to the sequential
schedule.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import accounting
from .compressors import CompressorSpec, EfState, apply_feedback, apply_message, compress
from .models import SplitModel, grad_norm_sq

PUBLIC_KINDS = ("svfl", "cvfl", "efvfl")
PRIVATE_KINDS = ("efvfl_private", "cvfl_private")
ALGORITHM_KINDS = PUBLIC_KINDS + PRIVATE_KINDS

# rng stream tags (children of the run seed)
_TAG_INIT_WEIGHTS = 1
_TAG_BATCH = 2
_TAG_COMPRESS = 3


class ConfigError(ValueError):
    pass


class DivergedAtRound(RuntimeError):
    def __init__(self, t, traces=None):
        super().__init__(f"non-finite loss or parameters at round {t}")
        self.round = t
        self.traces = traces or []


@dataclass(frozen=True)
class AlgorithmSpec:
    kind: str
    eta: float
    rounds: int
    batch_size: int
    local_updates: int = 1
    weight_decay: float = 0.0
    eta_halve_epochs: tuple = ()
    compress_x0: bool = False
    downlink_scheme: int | None = None  # None -> 1 for public, 2 for private

    def __post_init__(self):
        if self.kind not in ALGORITHM_KINDS:
            raise ConfigError(f"unknown algorithm {self.kind!r}")
        if not (self.eta > 0 and math.isfinite(self.eta)):
            raise ConfigError("eta must be positive and finite")
        if self.rounds < 0:
            raise ConfigError("rounds must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")
        if self.local_updates < 1:
            raise ConfigError("local updates must be >= 1")
        if self.is_private and self.local_updates != 1:
            raise ConfigError("private labels require single local update")
        scheme = self.resolved_downlink_scheme
        if self.is_private and scheme != 2:
            raise ConfigError("private labels use downlink scheme 2")
        if not self.is_private and scheme not in (1, 3):
            raise ConfigError("public labels use downlink scheme 1 or 3")
        if self.compress_x0 and self.is_private:
            raise ConfigError("compressing x_0 is pointless with private labels")

    @property
    def is_private(self) -> bool:
        return self.kind in PRIVATE_KINDS

    @property
    def uses_error_feedback(self) -> bool:
        return self.kind in ("svfl", "efvfl", "efvfl_private")

    @property
    def resolved_downlink_scheme(self) -> int:
        if self.downlink_scheme is not None:
            return self.downlink_scheme
        return 2 if self.is_private else 1


@dataclass
class RoundTrace:
    """One round of metrics; fields beyond the first five need diagnostics.

    grad_offset_sq is the squared distance between the round's update
    direction and the true full-batch gradient, recorded for the bound checks.
    """

    t: int
    loss: float
    surrogate_grad_sq: float
    uplink_bits: int
    downlink_bits: int
    grad_sq: float | None = None
    distortion: float | None = None
    val_acc: float | None = None
    true_loss: float | None = None
    grad_offset_sq: float | None = None


@dataclass
class RunResult:
    traces: list
    blocks: list
    init_uplink_bits: int
    init_downlink_bits: int
    seed: int

    @property
    def uplink_total(self) -> int:
        return self.init_uplink_bits + sum(tr.uplink_bits for tr in self.traces)

    @property
    def downlink_total(self) -> int:
        return self.init_downlink_bits + sum(tr.downlink_bits for tr in self.traces)


def shared_batch(sampler_seed: int, t: int, q: int, n: int, batch_size: int,
                 local_updates: int = 1) -> np.ndarray:
    """The shared mini-batch every machine derives for local step (t, q).

    Deterministic in (seed, t, q), so simulated machines never have to talk
    to agree on it.  Gradient steps are numbered globally as
    s = t * local_updates + q; each run of ceil(n / B) consecutive steps walks
    one seeded permutation of [n], so the batches of such a block partition
    the sample set (the last batch of a block may be short when B does not
    divide n).
    """
    if batch_size > n:
        raise ConfigError(f"batch size {batch_size} exceeds dataset size {n}")
    if batch_size == n:
        return np.arange(n)
    step = t * local_updates + q
    per_epoch = math.ceil(n / batch_size)
    epoch, slot = divmod(step, per_epoch)
    rng = np.random.default_rng(np.random.SeedSequence([sampler_seed, _TAG_BATCH, epoch]))
    perm = rng.permutation(n)
    return np.sort(perm[slot * batch_size:(slot + 1) * batch_size])


def init_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, _TAG_INIT_WEIGHTS]))


def _compress_rng(seed: int, round_index: int, machine: int) -> np.random.Generator:
    # round_index 0 is the initial full-matrix transmission; rounds are 1-based
    return np.random.default_rng(np.random.SeedSequence([seed, _TAG_COMPRESS, round_index, machine]))


def machine_gradients(model: SplitModel, kind: str, blocks, x0_view, batch, bank_rows,
                      run_map=map) -> list:
    """Per-machine gradients for one step, in block order.

    bank_rows[k] holds the batch rows of client k's exchanged representation.
    x0_view is the fusion parameter vector as seen by clients (frozen at the
    round start, and possibly a compressed surrogate of it); the server
    always differentiates at its own current parameters blocks[0].

    Public-label machines insert their own fresh representation in place of
    their surrogate; with private labels the server computes every partial
    from the surrogates alone and clients only chain through their local
    maps.  For svfl the bank rows are fresh rows, so the same code applies.
    """
    K = model.n_clients

    if kind in PRIVATE_KINDS:
        g0, gvs = model.fusion.partials(blocks[0], bank_rows, batch)

        def chain(k):
            return model.maps[k].vjp(blocks[k + 1], gvs[k], batch)

        return [g0] + list(run_map(chain, range(K)))

    def one_machine(m):
        if m == 0:
            g0, _ = model.fusion.partials(blocks[0], bank_rows, batch)
            return g0
        k = m - 1
        fresh = model.maps[k].forward(blocks[m], batch)
        reps = [fresh if j == k else bank_rows[j] for j in range(K)]
        _, gvs = model.fusion.partials(x0_view, reps, batch)
        return model.maps[k].vjp(blocks[m], gvs[k], batch)

    return list(run_map(one_machine, range(K + 1)))


class _Exchange:
    """The replicated per-client representation estimates (and optional G_0).

    Holds one canonical copy of each N x E_k estimate; with check_replicas,
    per-machine replicas are driven by the same broadcast messages and
    verified bit-identical every round.
    """

    def __init__(self, model, spec, seed, blocks, *, error_feedback, compress_x0,
                 check_replicas):
        self.spec = spec
        self.error_feedback = error_feedback
        self._model = model
        self._seed = seed
        full = np.arange(model.n_samples)
        self.states = []
        bits = 0
        for k, m in enumerate(model.maps):
            fresh = m.forward(blocks[k + 1], full)
            self.states.append(EfState(compress(spec, fresh, _compress_rng(seed, 0, k + 1))))
            bits += accounting.payload_bits(spec, fresh.size)
        self.init_uplink_bits = bits
        self.x0_state = None
        if compress_x0:
            self.x0_state = EfState(compress(spec, blocks[0], _compress_rng(seed, 0, 0)))
        self.replicas = None
        if check_replicas:
            self.replicas = [[EfState(st.surrogate.copy()) for st in self.states]
                             for _ in range(model.n_clients + 1)]

    def rows(self, k: int, batch) -> np.ndarray:
        return self.states[k].surrogate[batch]

    def client_update(self, k: int, fresh_rows, rows, round_index: int) -> int:
        """One client's exchange step; returns the transmitted payload bits."""
        rng = _compress_rng(self._seed, round_index + 1, k + 1)
        if self.error_feedback:
            message = apply_feedback(self.states[k], fresh_rows, self.spec, rng, rows=rows)
        else:
            message = compress(self.spec, fresh_rows, rng)
            self.states[k].surrogate[rows] = message
            self.states[k].step += 1
        if self.replicas is not None:
            for rep in self.replicas:
                if self.error_feedback:
                    apply_message(rep[k], message, self.spec, rows=rows)
                else:
                    rep[k].surrogate[rows] = message
                    rep[k].step += 1
        return accounting.payload_bits(self.spec, fresh_rows.size)

    def x0_update(self, x0, round_index: int) -> int:
        apply_feedback(self.x0_state, x0, self.spec, _compress_rng(self._seed, round_index + 1, 0))
        return accounting.payload_bits(self.spec, x0.size)

    def assert_replicas_identical(self):
        if self.replicas is None:
            return
        for k, st in enumerate(self.states):
            canon = st.surrogate.tobytes()
            if any(rep[k].surrogate.tobytes() != canon for rep in self.replicas):
                raise AssertionError(f"replica divergence in block {k + 1}")

    def distortion(self, blocks) -> float:
        model = self._model
        full = np.arange(model.n_samples)
        total = 0.0
        for k, m in enumerate(model.maps):
            diff = self.states[k].surrogate - m.forward(blocks[k + 1], full)
            total += float(np.sum(diff * diff))
        if self.x0_state is not None:
            diff = self.x0_state.surrogate - blocks[0]
            total += float(np.sum(diff * diff))
        return total


def run(model: SplitModel, algo: AlgorithmSpec, compressor: CompressorSpec, seed: int, *,
        diagnostics: bool = False,
        parallel: bool = False,
        check_replicas: bool = False,
        bank_fault=None,
        epoch_hook=None,
        initial_blocks=None) -> RunResult:
    """Execute one training run and return its trace.

    Args:
      model: split model over the dataset.
      algo: algorithm spec (kind, stepsize, rounds, batching, ...).
      compressor: applied to client uplink; ignored for svfl (always exact).
      seed: drives weight init, batch sampling, and stochastic compression.
      diagnostics: also record the full-batch loss/gradient, the distortion,
        and the offset between update direction and true gradient (slow on
        large datasets: full forward passes every round).
      parallel: run per-machine compute phases on a thread pool.
      check_replicas: maintain per-machine copies of the exchanged estimates
        and assert they stay bit-identical (tests; memory-hungry on large N).
      bank_fault: callable(t, exchange) applied after the round's metrics are
        captured and before gradients are computed; lets tests corrupt the
        surrogates to prove the bound checkers catch violations.
      epoch_hook: callable(blocks, epoch_index) -> float evaluated at each
        epoch boundary; its value lands in the trace's val_acc.
      initial_blocks: start from these parameters instead of the seeded init.

    Raises:
      DivergedAtRound: when the loss or any parameter goes non-finite.
    """
    spec = CompressorSpec("identity") if algo.kind == "svfl" else compressor
    n = model.n_samples
    K = model.n_clients
    scheme = algo.resolved_downlink_scheme
    blocks = [np.asarray(b, dtype=float).copy()
              for b in (initial_blocks if initial_blocks is not None else
                        model.init_state(init_rng(seed)))]
    rep_dims = [m.out_dim for m in model.maps]
    if scheme == 3 and len(set(rep_dims)) > 1:
        raise ConfigError("downlink scheme 3 needs a common representation size")

    # svfl never materializes the (exactly synchronized) bank; every machine
    # just uses fresh rows -- same algorithm, without the O(N) bookkeeping
    fast_exact = algo.kind == "svfl"
    # non-identity messages carry only the current batch's rows; the identity
    # exchanges full matrices (exact tracking)
    full_rows = spec.kind == "identity"

    exchange = None
    if fast_exact:
        init_uplink = sum(accounting.payload_bits(spec, n * e) for e in rep_dims)
    else:
        exchange = _Exchange(model, spec, seed, blocks,
                             error_feedback=algo.uses_error_feedback,
                             compress_x0=algo.compress_x0,
                             check_replicas=check_replicas)
        init_uplink = exchange.init_uplink_bits
    init_downlink = accounting.init_downlink_bits(
        scheme, init_uplink, n_samples=n, rep_dims=rep_dims, d0=model.fusion.param_dim)

    rounds_per_epoch = max(1, math.ceil(n / (algo.batch_size * algo.local_updates)))
    executor = ThreadPoolExecutor(max_workers=K + 1) if parallel else None
    run_map = executor.map if executor else map
    all_rows = np.arange(n)
    traces = []
    try:
        for t in range(algo.rounds):
            epoch = t // rounds_per_epoch
            eta = algo.eta * 0.5 ** sum(1 for e in algo.eta_halve_epochs if epoch >= e)
            batch = shared_batch(seed, t, 0, n, algo.batch_size, algo.local_updates)

            trace = RoundTrace(t=t, loss=math.nan, surrogate_grad_sq=math.nan,
                               uplink_bits=0, downlink_bits=0)
            if diagnostics:
                true_grads = model.gradient(blocks, all_rows)
                trace.grad_sq = grad_norm_sq(true_grads)
                trace.true_loss = model.loss(blocks, all_rows)
                trace.distortion = 0.0 if fast_exact else exchange.distortion(blocks)

            def fresh_at(k, rows, params):
                return model.maps[k].forward(params, rows)

            # what the other machines see is frozen at the round-start point
            start_params = [blocks[k + 1].copy() for k in range(K)] if fast_exact else None

            def exchanged_rows(rows):
                if fast_exact:
                    return list(run_map(lambda k: fresh_at(k, rows, start_params[k]), range(K)))
                return [exchange.rows(k, rows) for k in range(K)]

            uplink = 0
            if not algo.uses_error_feedback:
                # direct compression: this round's compressed batch rows are
                # substituted before anything else reads the cache
                fresh_list = list(run_map(
                    lambda k: fresh_at(k, batch, blocks[k + 1]), range(K)))
                for k in range(K):
                    uplink += exchange.client_update(k, fresh_list[k], batch, t)

            bank_rows = exchanged_rows(batch)
            trace.loss = model.fusion.loss(blocks[0], bank_rows, batch)
            if not math.isfinite(trace.loss):
                raise DivergedAtRound(t, traces)
            if bank_fault is not None:
                if exchange is None:
                    raise ConfigError("bank fault hook needs materialized surrogates")
                bank_fault(t, exchange)
                bank_rows = [exchange.rows(k, batch) for k in range(K)]

            if exchange is not None and exchange.x0_state is not None:
                x0_view = exchange.x0_state.surrogate.copy()
            else:
                x0_view = blocks[0].copy()

            for q in range(algo.local_updates):
                if q > 0:
                    batch = shared_batch(seed, t, q, n, algo.batch_size, algo.local_updates)
                    bank_rows = exchanged_rows(batch)
                grads = machine_gradients(model, algo.kind, blocks, x0_view, batch,
                                          bank_rows, run_map)
                if q == 0:
                    trace.surrogate_grad_sq = grad_norm_sq(grads)
                    if diagnostics:
                        trace.grad_offset_sq = float(sum(
                            np.sum((g - tg) ** 2) for g, tg in zip(grads, true_grads)))
                for m in range(K + 1):
                    g = grads[m]
                    if algo.weight_decay:
                        g = g + algo.weight_decay * blocks[m]
                    blocks[m] = blocks[m] - eta * g

            if any(not np.all(np.isfinite(b)) for b in blocks):
                raise DivergedAtRound(t, traces)

            if algo.uses_error_feedback:
                # deltas are taken at the updated point, on the rows of the
                # round's last batch (all rows for the identity)
                rows = all_rows if full_rows else batch
                if fast_exact:
                    uplink = sum(accounting.payload_bits(spec, rows.size * e)
                                 for e in rep_dims)
                else:
                    fresh_list = list(run_map(
                        lambda k: fresh_at(k, rows, blocks[k + 1]), range(K)))
                    for k in range(K):
                        uplink += exchange.client_update(k, fresh_list[k], rows, t)

            trace.uplink_bits = uplink
            trace.downlink_bits = accounting.downlink_bits(
                scheme, uplink, batch_size=batch.size, rep_dims=rep_dims,
                n_samples=n, d0=model.fusion.param_dim)
            if algo.compress_x0 and exchange is not None:
                trace.downlink_bits += exchange.x0_update(blocks[0], t)
            if exchange is not None:
                exchange.assert_replicas_identical()

            if epoch_hook is not None and (t + 1) % rounds_per_epoch == 0:
                trace.val_acc = epoch_hook(blocks, (t + 1) // rounds_per_epoch - 1)
            traces.append(trace)
    finally:
        if executor:
            executor.shutdown(wait=False)
    return RunResult(traces=traces, blocks=blocks, init_uplink_bits=init_uplink,
                     init_downlink_bits=init_downlink, seed=seed)
