"""
A tiny, seeded, fine-grained MoE transformer with planted expert specialization.

The weights are not trained. They are constructed so that the phenomena the
routing policies act on are known by construction:

* every domain owns a unit direction (its centroid) in embedding space and its
  tokens are embedded along it;
* a specialized expert's gate row points along its domain centroid, every
  other gate row is noise orthogonal to the centroids;
* a planted key expert owns a hidden unit that fires on its domain and writes
  a rank-1 component onto the output-head direction of the domain's answer
  token, so dropping it costs the answer and forcing it in recovers it.

Routers read the normalised token stream (embedding plus position), so a
token's routing at a layer depends on the token and its position only and
never on what earlier experts wrote into the residual stream.
"""
import logging
import math
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from experts.exceptions import ContractViolation, InvalidArgument
from experts.utils.numerics import softmax_rows
from experts.utils.storage import atomic_write

logger = logging.getLogger(__name__)

MAGIC = b'MOERLAB1'
PREFILL = 'prefill'
DECODE = 'decode'
PHASES = (PREFILL, DECODE)

# Construction constants shared by every planted model.
EMBED_NOISE = 1.0
POSITION_SCALE = 0.1
ATTENTION_OUT_SCALE = 0.03
HEAD_NOISE = 1.0
ANSWER_SCALE = 1.0
RMS_EPS = 1e-6


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 8
    num_experts: int = 32
    k_base: int = 8
    d_model: int = 64
    d_expert: int = 128
    vocab_size: int = 256
    num_domains: int = 3
    seed: int = 0
    max_seq_len: int = 64

    def validate(self):
        for item in fields(self):
            value = getattr(self, item.name)
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool):
                raise InvalidArgument(f'{item.name} must be an integer')
            minimum = 0 if item.name == 'seed' else 1
            if value < minimum:
                raise InvalidArgument(f'{item.name} must be >= {minimum}')
        if self.seed >= 2 ** 64:
            raise InvalidArgument('seed must fit in 64 bits')
        if self.k_base > self.num_experts:
            raise InvalidArgument('k_base must not exceed num_experts')
        if self.vocab_size < self.num_domains:
            raise InvalidArgument('vocab_size must be at least num_domains')
        if 2 * self.num_domains > self.d_model:
            raise InvalidArgument('d_model must hold a centroid and an answer direction per domain')
        return self

    @property
    def header_values(self):
        return tuple(int(getattr(self, item.name)) for item in fields(self))


@dataclass(frozen=True)
class SpecializedExpert:
    layer: int
    domain: int
    expert: int
    alpha: float


@dataclass(frozen=True)
class PlantedKey:
    layer: int
    expert: int
    domain: int
    gamma: float


@dataclass(frozen=True)
class SyntheticModelSpec:
    specialized: tuple = ()
    planted_keys: tuple = ()
    noise_scale: float = 1.0
    expert_noise: float = 0.02
    answer_tokens: tuple = ()

    def specialized_map(self):
        """(layer, domain) -> [(expert, alpha), ...] in declaration order."""
        mapping = {}
        for item in self.specialized:
            mapping.setdefault((item.layer, item.domain), []).append((item.expert, item.alpha))
        return mapping

    def answer_token(self, domain):
        return self.answer_tokens[domain]

    def validate(self, config):
        if self.noise_scale < 0 or self.expert_noise < 0:
            raise InvalidArgument('noise scales must be non-negative')
        if len(self.answer_tokens) != config.num_domains:
            raise InvalidArgument('one answer token per domain is required')
        if len(set(self.answer_tokens)) != len(self.answer_tokens):
            raise InvalidArgument('answer tokens must be distinct')
        for token in self.answer_tokens:
            if not 0 <= token < config.vocab_size:
                raise InvalidArgument(f'answer token {token} outside the vocabulary')
        for item in self.specialized:
            _check_slot(config, item.layer, item.expert, item.domain)
            if item.alpha <= 0:
                raise InvalidArgument('alignment strengths must be positive')
        specialized = {(s.layer, s.domain, s.expert) for s in self.specialized}
        for key in self.planted_keys:
            _check_slot(config, key.layer, key.expert, key.domain)
            if key.gamma <= 0:
                raise InvalidArgument('output strengths must be positive')
            if (key.layer, key.domain, key.expert) not in specialized:
                raise InvalidArgument(
                    f'key expert L{key.layer}E{key.expert} is not specialized for domain {key.domain}'
                )
        return self

    def to_dict(self):
        return {
            'specialized': [_as_plain(s) for s in self.specialized],
            'planted_keys': [_as_plain(k) for k in self.planted_keys],
            'noise_scale': self.noise_scale,
            'expert_noise': self.expert_noise,
            'answer_tokens': list(self.answer_tokens),
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            specialized=tuple(SpecializedExpert(**item) for item in data.get('specialized', ())),
            planted_keys=tuple(PlantedKey(**item) for item in data.get('planted_keys', ())),
            noise_scale=float(data.get('noise_scale', 1.0)),
            expert_noise=float(data.get('expert_noise', 0.02)),
            answer_tokens=tuple(int(t) for t in data.get('answer_tokens', ())),
        )


def _as_plain(item):
    return {f.name: getattr(item, f.name) for f in fields(item)}


def _check_slot(config, layer, expert, domain):
    if not 0 <= layer < config.num_layers:
        raise InvalidArgument(f'layer {layer} out of range')
    if not 0 <= expert < config.num_experts:
        raise InvalidArgument(f'expert {expert} out of range')
    if not 0 <= domain < config.num_domains:
        raise InvalidArgument(f'domain {domain} out of range')


def default_answer_tokens(config):
    """The last ``num_domains`` vocabulary ids, one per domain."""
    return tuple(range(config.vocab_size - config.num_domains, config.vocab_size))


def domain_vocabulary(config, answer_tokens):
    """Token ids each domain's text is drawn from (answer tokens excluded)."""
    reserved = set(answer_tokens)
    body = np.array([t for t in range(config.vocab_size) if t not in reserved], dtype=np.int64)
    slices = np.array_split(body, config.num_domains)
    return [
        piece if piece.size else np.array([answer_tokens[d]], dtype=np.int64)
        for d, piece in enumerate(slices)
    ]


def plan_specialization(config, seed=None, experts_per_domain=2, alpha=4.0, key_alpha=2.0,
                        gamma=10.0, noise_scale=1.0, expert_noise=0.02, plant_keys=True):
    """Default planted plan.

    Every layer gets ``experts_per_domain`` strongly aligned experts per domain.
    One key expert per domain sits at evenly spaced layers; it is aligned with
    the weaker ``key_alpha`` so it hovers around the top-k boundary.
    """
    config.validate()
    rng = np.random.default_rng([config.seed if seed is None else int(seed), 1])
    per_layer = config.num_domains * (experts_per_domain + (1 if plant_keys else 0))
    if per_layer > config.num_experts:
        raise InvalidArgument('not enough experts per layer for the requested plan')

    key_layers = {}
    if plant_keys:
        for domain in range(config.num_domains):
            key_layers[domain] = (domain + 1) * config.num_layers // (config.num_domains + 1)

    specialized = []
    keys = []
    for layer in range(config.num_layers):
        ids = rng.permutation(config.num_experts)[:per_layer]
        cursor = 0
        for domain in range(config.num_domains):
            for _ in range(experts_per_domain):
                specialized.append(SpecializedExpert(layer, domain, int(ids[cursor]), alpha))
                cursor += 1
            if plant_keys:
                expert = int(ids[cursor])
                cursor += 1
                if key_layers[domain] == layer:
                    specialized.append(SpecializedExpert(layer, domain, expert, key_alpha))
                    keys.append(PlantedKey(layer, expert, domain, gamma))

    return SyntheticModelSpec(
        specialized=tuple(specialized),
        planted_keys=tuple(keys),
        noise_scale=noise_scale,
        expert_noise=expert_noise,
        answer_tokens=default_answer_tokens(config),
    )


@dataclass(frozen=True)
class ModelParams:
    config: ModelConfig
    embeddings: np.ndarray
    positions: np.ndarray
    attention: np.ndarray
    gates: np.ndarray
    expert_in: np.ndarray
    expert_out: np.ndarray
    head: np.ndarray

    BLOCKS = ('embeddings', 'positions', 'attention', 'gates', 'expert_in', 'expert_out', 'head')

    def __post_init__(self):
        for name in self.BLOCKS:
            getattr(self, name).setflags(write=False)

    def block_shapes(self):
        return _block_shapes(self.config)

    def equals(self, other):
        return self.config == other.config and all(
            np.array_equal(getattr(self, name), getattr(other, name)) for name in self.BLOCKS
        )


def _block_shapes(config):
    L, E = config.num_layers, config.num_experts
    d, h, V = config.d_model, config.d_expert, config.vocab_size
    return {
        'embeddings': (V, d),
        'positions': (config.max_seq_len, d),
        'attention': (L, 4, d, d),
        'gates': (L, E, d),
        'expert_in': (L, E, d, h),
        'expert_out': (L, E, h, d),
        'head': (d, V),
    }


def build_model(config, spec):
    config.validate()
    spec.validate(config)
    rng = np.random.default_rng(config.seed)
    L, E = config.num_layers, config.num_experts
    d, h, V, D = config.d_model, config.d_expert, config.vocab_size, config.num_domains

    basis, _ = np.linalg.qr(rng.standard_normal((d, 2 * D)))
    centroids = basis[:, :D].T
    answer_dirs = basis[:, D:].T
    complement = np.eye(d) - basis @ basis.T

    embeddings = (rng.standard_normal((V, d)) / math.sqrt(d) * EMBED_NOISE) @ complement
    for domain, tokens in enumerate(domain_vocabulary(config, spec.answer_tokens)):
        if tokens.size > 1 or tokens[0] not in spec.answer_tokens:
            embeddings[tokens] += centroids[domain]

    positions = (rng.standard_normal((config.max_seq_len, d)) / math.sqrt(d) * POSITION_SCALE) @ complement

    attention = rng.standard_normal((L, 4, d, d)) / math.sqrt(d)
    attention[:, 3] *= ATTENTION_OUT_SCALE

    # equal-norm noise rows keep unspecialized experts exchangeable
    noise = rng.standard_normal((L, E, d)) @ complement
    norms = np.linalg.norm(noise, axis=-1, keepdims=True)
    noise = np.divide(noise, norms, out=np.zeros_like(noise), where=norms > 0) * math.sqrt(d - 2 * D)
    gates = spec.noise_scale * noise
    for item in spec.specialized:
        gates[item.layer, item.expert] += item.alpha * centroids[item.domain]

    expert_in = rng.standard_normal((L, E, d, h)) / math.sqrt(d)
    expert_out = rng.standard_normal((L, E, h, d)) / math.sqrt(h) * spec.expert_noise
    for key in spec.planted_keys:
        # hidden unit 0 fires on the domain; its output row writes onto the answer direction
        expert_in[key.layer, key.expert, :, 0] = centroids[key.domain]
        expert_out[key.layer, key.expert, 0, :] += key.gamma * answer_dirs[key.domain]

    head = complement @ (rng.standard_normal((d, V)) / math.sqrt(d) * HEAD_NOISE)
    for domain, token in enumerate(spec.answer_tokens):
        head[:, token] = ANSWER_SCALE * answer_dirs[domain]

    logger.debug('Built model L=%d E=%d k=%d seed=%d', L, E, config.k_base, config.seed)
    return ModelParams(
        config=config,
        embeddings=embeddings,
        positions=positions,
        attention=attention,
        gates=gates,
        expert_in=expert_in,
        expert_out=expert_out,
        head=head,
    )


def save_model(params, path):
    """Serialise to the little-endian MOERLAB1 binary layout."""
    header = MAGIC + struct.pack('<%dQ' % len(params.config.header_values), *params.config.header_values)
    blocks = [np.ascontiguousarray(getattr(params, name), dtype='<f8').tobytes() for name in ModelParams.BLOCKS]
    atomic_write(path, header + b''.join(blocks))
    return Path(path)


def load_model(path):
    payload = Path(path).read_bytes()
    count = len(fields(ModelConfig))
    header_size = len(MAGIC) + 8 * count
    if payload[:len(MAGIC)] != MAGIC or len(payload) < header_size:
        raise InvalidArgument(f'{path} is not a MOERLAB1 model file')
    config = ModelConfig(*struct.unpack('<%dQ' % count, payload[len(MAGIC):header_size])).validate()

    offset = header_size
    arrays = {}
    for name, shape in _block_shapes(config).items():
        size = int(np.prod(shape)) * 8
        if offset + size > len(payload):
            raise InvalidArgument(f"{path} is truncated in block '{name}'")
        arrays[name] = np.frombuffer(payload, dtype='<f8', count=size // 8, offset=offset).reshape(shape).astype(np.float64)
        offset += size
    if offset != len(payload):
        raise InvalidArgument(f'{path} has trailing bytes')
    return ModelParams(config=config, **arrays)


@dataclass(frozen=True)
class RoutingContext:
    """What a policy may look at besides the router logits of one token."""
    layer: int
    position: int
    phase: str
    sequence: int
    attention_mass: np.ndarray
    domain: int = None


@dataclass
class RoutingTrace:
    policy: str
    phases: tuple
    sequence_ids: tuple
    logits: np.ndarray
    weights: np.ndarray
    selected: np.ndarray
    k_used: np.ndarray

    @classmethod
    def empty(cls, policy, phases, sequence_ids, batch, length, config):
        shape = (batch, length, config.num_layers, config.num_experts)
        return cls(
            policy=policy,
            phases=tuple(phases),
            sequence_ids=tuple(sequence_ids),
            logits=np.zeros(shape),
            weights=np.zeros(shape),
            selected=np.zeros(shape, dtype=bool),
            k_used=np.zeros(shape[:3], dtype=np.int64),
        )

    def copy(self):
        return RoutingTrace(
            policy=self.policy,
            phases=self.phases,
            sequence_ids=self.sequence_ids,
            logits=self.logits.copy(),
            weights=self.weights.copy(),
            selected=self.selected.copy(),
            k_used=self.k_used.copy(),
        )

    @property
    def total_activations(self):
        return int(self.k_used.sum())

    def selected_experts(self, batch, position, layer):
        """(expert, weight) pairs by descending weight, lower id first on ties."""
        experts = np.flatnonzero(self.selected[batch, position, layer])
        weights = self.weights[batch, position, layer, experts]
        order = np.lexsort((experts, -weights))
        return [(int(experts[i]), float(weights[i])) for i in order]

    def records(self):
        batch, length, layers = self.k_used.shape
        for b in range(batch):
            for pos in range(length):
                for layer in range(layers):
                    yield {
                        'seq_id': int(self.sequence_ids[b]),
                        'pos': pos,
                        'layer': layer,
                        'phase': self.phases[pos],
                        'policy': self.policy,
                        'k_used': int(self.k_used[b, pos, layer]),
                        'selected': self.selected_experts(b, pos, layer),
                    }


@dataclass
class ForwardResult:
    logits: np.ndarray
    trace: RoutingTrace
    attention_mass: np.ndarray
    layer_inputs: list = field(repr=False)
    tokens: np.ndarray = field(repr=False, default=None)
    domains: tuple = None

    def final_distributions(self):
        """Next-token distribution at the last position of every sequence."""
        return softmax_rows(self.logits[:, -1, :])

    def predictions(self):
        return np.argmax(self.logits[:, -1, :], axis=-1)


def _rms_norm(hidden):
    return hidden / np.sqrt(np.mean(hidden ** 2, axis=-1, keepdims=True) + RMS_EPS)


def _attention(weights, x):
    wq, wk, wv, wo = weights
    length, d = x.shape[1], x.shape[2]
    scores = (x @ wq) @ np.swapaxes(x @ wk, 1, 2) / math.sqrt(d)
    scores = np.where(np.tril(np.ones((length, length), dtype=bool)), scores, -np.inf)
    probs = np.exp(scores - scores.max(axis=-1, keepdims=True))
    probs /= probs.sum(axis=-1, keepdims=True)
    return (probs @ (x @ wv)) @ wo, probs.sum(axis=1)


def _mix_experts(expert_in, expert_out, x, weights, selected):
    """Weighted sum of the selected experts' outputs, experts in id order."""
    d = x.shape[-1]
    flat_x = x.reshape(-1, d)
    flat_w = weights.reshape(-1, weights.shape[-1])
    flat_sel = selected.reshape(-1, selected.shape[-1])
    out = np.zeros_like(flat_x)
    for expert in range(flat_sel.shape[1]):
        rows = np.flatnonzero(flat_sel[:, expert])
        if rows.size == 0:
            continue
        hidden = np.maximum(flat_x[rows] @ expert_in[expert], 0.0)
        out[rows] += flat_w[rows, expert, None] * (hidden @ expert_out[expert])
    return out.reshape(x.shape)


def expert_output(params, layer, expert, x):
    """A single expert applied to normalised input rows ``x``."""
    hidden = np.maximum(np.atleast_2d(x) @ params.expert_in[layer, expert], 0.0)
    return hidden @ params.expert_out[layer, expert]


def _as_batch(params, tokens):
    batch = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    if batch.ndim != 2 or batch.shape[1] == 0:
        raise InvalidArgument('token sequences must be non-empty')
    if batch.min() < 0 or batch.max() >= params.config.vocab_size:
        raise InvalidArgument('token id outside the vocabulary')
    if batch.shape[1] > params.config.max_seq_len:
        raise InvalidArgument(f'sequence longer than max_seq_len={params.config.max_seq_len}')
    return batch


def _phase_tags(length, phase, decode_from):
    if phase not in PHASES:
        raise InvalidArgument(f"unknown phase '{phase}'")
    if decode_from is None:
        return tuple(phase for _ in range(length))
    return tuple(PREFILL if pos < decode_from else DECODE for pos in range(length))


def forward(params, tokens, policy, phase=PREFILL, decode_from=None, sequence_ids=None, domains=None):
    """Run one sequence, or a batch of equal-length sequences, through the model.

    Positions at or after ``decode_from`` are tagged as decode steps; they are
    computed in the same causal pass. ``domains`` labels each sequence with the
    domain it was drawn from and is handed to the policy unchanged.
    """
    return _run(params, tokens, policy, phase, decode_from, sequence_ids, domains)


def forward_with_pruned_expert(params, tokens, policy, pruned, phase=PREFILL, decode_from=None,
                               sequence_ids=None, reference=None, domains=None):
    """Same as ``forward`` with one expert's router logit forced to -inf.

    Given the unpruned ``reference`` result for the same inputs and policy, the
    layers before the pruned one are reused instead of recomputed.
    """
    layer, expert = pruned
    if not 0 <= layer < params.config.num_layers or not 0 <= expert < params.config.num_experts:
        raise InvalidArgument(f'cannot prune L{layer}E{expert}')
    if reference is not None:
        return resume_forward(params, reference, policy, layer, pruned=pruned)
    return _run(params, tokens, policy, phase, decode_from, sequence_ids, domains, pruned=pruned)


def resume_forward(params, reference, policy, start_layer, pruned=None):
    """Recompute from ``start_layer`` on, reusing ``reference`` for earlier layers."""
    trace = reference.trace.copy()
    trace.policy = policy.name
    attention_mass = reference.attention_mass.copy()
    hidden = reference.layer_inputs[start_layer]
    return _layers(params, hidden, policy, trace, attention_mass, reference.layer_inputs[:start_layer],
                   start_layer, pruned, reference.tokens, reference.domains)


def _run(params, tokens, policy, phase, decode_from, sequence_ids, domains=None, pruned=None):
    batch = _as_batch(params, tokens)
    size, length = batch.shape
    ids = tuple(range(size)) if sequence_ids is None else tuple(sequence_ids)
    if domains is not None:
        domains = tuple(int(d) for d in domains)
        if len(domains) != size:
            raise InvalidArgument('one domain label per sequence is required')
    trace = RoutingTrace.empty(policy.name, _phase_tags(length, phase, decode_from), ids, size, length, params.config)
    attention_mass = np.zeros((size, params.config.num_layers, length))
    hidden = params.embeddings[batch] + params.positions[:length]
    return _layers(params, hidden, policy, trace, attention_mass, [], 0, pruned, batch, domains)


def _layers(params, hidden, policy, trace, attention_mass, layer_inputs, start_layer, pruned, tokens, domains=None):
    config = params.config
    size, length = hidden.shape[:2]
    route_input = _rms_norm(params.embeddings[tokens] + params.positions[:length])
    inv_sqrt_d = 1.0 / math.sqrt(config.d_model)
    layer_inputs = list(layer_inputs)

    for layer in range(start_layer, config.num_layers):
        layer_inputs.append(hidden)
        attended, mass = _attention(params.attention[layer], _rms_norm(hidden))
        hidden = hidden + attended
        attention_mass[:, layer, :] = mass

        x = _rms_norm(hidden)
        logits = (route_input @ params.gates[layer].T) * inv_sqrt_d
        if pruned is not None and pruned[0] == layer:
            logits[..., pruned[1]] = -np.inf

        weights = np.zeros((size, length, config.num_experts))
        selected = np.zeros((size, length, config.num_experts), dtype=bool)
        for b in range(size):
            for pos in range(length):
                context = RoutingContext(
                    layer=layer,
                    position=pos,
                    phase=trace.phases[pos],
                    sequence=trace.sequence_ids[b],
                    attention_mass=mass[b],
                    domain=None if domains is None else domains[b],
                )
                decision = policy.route(logits[b, pos], context)
                experts = np.asarray(decision.experts, dtype=np.int64)
                if experts.size == 0 or experts.min() < 0 or experts.max() >= config.num_experts:
                    raise ContractViolation(f"policy '{policy.name}' selected an expert outside 0..{config.num_experts - 1}")
                if np.unique(experts).size != experts.size:
                    raise ContractViolation(f"policy '{policy.name}' selected an expert twice")
                weights[b, pos, experts] = decision.weights
                selected[b, pos, experts] = True
                trace.k_used[b, pos, layer] = experts.size

        trace.logits[:, :, layer, :] = logits
        trace.weights[:, :, layer, :] = weights
        trace.selected[:, :, layer, :] = selected
        hidden = hidden + _mix_experts(params.expert_in[layer], params.expert_out[layer], x, weights, selected)

    output = _rms_norm(hidden) @ params.head
    return ForwardResult(
        logits=output,
        trace=trace,
        attention_mass=attention_mass,
        layer_inputs=layer_inputs,
        tokens=tokens,
        domains=domains,
    )
