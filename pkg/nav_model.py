"""Three-branch navigation policy: coarse graph branch, fine view branch, history branch.

Each branch encodes its tokens with a stop token in front, attends to the two
instruction tokens (goal and path halves of the instruction vector) and scores
with a small tanh head. Branch scores are lifted onto the shared candidate
set and mixed with weights computed from the three encoded stop tokens.
"""

import math
from dataclasses import dataclass

import numpy as np

from errors import ShapeError
from scene import STOP
from tensor import (ParamStore, Tensor, attention_layer, concat, linear, log_softmax, logsumexp, reshape,
                    softmax, tanh, take)
from topological_map import CATEGORIES

HISTORY_REPRS = ('fused', 'state', 'observation')


@dataclass
class NavModelConfig:
    feat_dim: int = 16
    state_dim: int = 48
    hidden_dim: int = 32
    zeta: float = 0.1
    history_repr: str = 'fused'

    def validate(self):
        problems = []
        if self.hidden_dim < 1 or self.hidden_dim > 64:
            problems.append(('hidden_dim', 'must be in [1, 64]'))
        if self.zeta <= 0:
            problems.append(('zeta', 'must be > 0'))
        if self.history_repr not in HISTORY_REPRS:
            problems.append(('history_repr', f"must be one of {', '.join(HISTORY_REPRS)}"))
        return problems


@dataclass
class FusionWeights:
    sigma_f: float
    sigma_c: float
    sigma_h: float

    def as_list(self):
        return [self.sigma_f, self.sigma_c, self.sigma_h]


@dataclass
class NavDecision:
    """Scores of one decision step. ``-inf`` marks candidates that cannot be chosen."""

    candidates: list
    coarse: np.ndarray
    fine: np.ndarray
    history: np.ndarray
    weights: FusionWeights
    final: np.ndarray
    logits: Tensor
    finite_index: np.ndarray

    def action(self):
        return select_action(self.final, self.candidates)

    def branch_rows(self):
        return {
            'coarse': _jsonable(self.coarse),
            'fine': _jsonable(self.fine),
            'history': _jsonable(self.history),
            'final': _jsonable(self.final),
        }


def _jsonable(values):
    return [None if not math.isfinite(v) else float(v) for v in np.asarray(values, dtype=np.float64)]


def select_action(final, candidates):
    """Argmax over candidates; ties go to the earliest (STOP, then ascending id)."""
    final = np.asarray(final, dtype=np.float64)
    if final.size == 0 or final.size != len(candidates):
        raise ValueError("select_action needs one score per candidate")
    best = np.flatnonzero(final == np.max(final))[0]
    return candidates[best]


def history_fusion(states, scores, feature, zeta):
    """softmax(C / zeta)^T Z + x for same-dimension arrays."""
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    scores = np.asarray(scores, dtype=np.float64)
    if len(states) != len(scores):
        raise ShapeError(f"{len(states)} attached states but {len(scores)} scores")
    return _mixture_weights(scores, zeta) @ states + np.asarray(feature, dtype=np.float64)


def _mixture_weights(scores, zeta):
    logits = np.asarray(scores, dtype=np.float64) / zeta
    e = np.exp(logits - logits.max())
    return e / e.sum()


class NavModel:
    """Parameters and forward pass of the fused policy."""

    def __init__(self, cfg=None, seed=0):
        self.cfg = cfg or NavModelConfig()
        self.params = ParamStore(seed)
        self._build()

    def _build(self):
        c, p = self.cfg, self.params
        d = c.hidden_dim
        p.add('instr.w', (c.feat_dim, d))
        p.add('instr.b', (d,), zeros=True)
        p.add('instr.type', (2, d), scale=0.1)
        p.add('coarse.w_x', (c.feat_dim, d))
        p.add('coarse.type', (len(CATEGORIES), d), scale=0.1)
        p.add('coarse.w_e', (), zeros=True)
        p.add('coarse.b_e', (), zeros=True)
        p.add('fine.w_r', (c.feat_dim, d))
        p.add('history.w_z', (c.state_dim, d))
        p.add('history.w_x', (c.feat_dim, d))
        p.add('history.s0', (), zeros=True)
        for branch in ('coarse', 'fine', 'history'):
            p.add(f'{branch}.stop', (d,), scale=0.1)
            for block in ('cross', 'self'):
                for proj in ('q', 'k', 'v'):
                    p.add(f'{branch}.{block}.w_{proj}', (d, d))
            p.add(f'{branch}.head.w1', (d, d))
            p.add(f'{branch}.head.b1', (d,), zeros=True)
            p.add(f'{branch}.head.w2', (d,))
            p.add(f'{branch}.head.b2', (), zeros=True)
        p.add('fusion.w', (3 * d, 3), scale=0.1 / math.sqrt(3 * d))
        p.add('fusion.b', (3,), zeros=True)

    # Building blocks

    def instruction_tokens(self, instruction):
        instruction = np.asarray(instruction, dtype=np.float64)
        if instruction.shape != (2 * self.cfg.feat_dim,):
            raise ShapeError(f"instruction must have {2 * self.cfg.feat_dim} entries, got {instruction.shape}")
        tokens = Tensor(instruction.reshape(2, self.cfg.feat_dim))
        return linear(tokens, self.params['instr.w'], self.params['instr.b']) + self.params['instr.type']

    def _attend(self, prefix, tokens, context, bias=None):
        p = self.params
        out = attention_layer(tokens @ p[f'{prefix}.w_q'], context @ p[f'{prefix}.w_k'],
                              context @ p[f'{prefix}.w_v'], additive_bias=bias)
        return tokens + out

    def _head(self, branch, tokens):
        p = self.params
        hidden = tanh(linear(tokens, p[f'{branch}.head.w1'], p[f'{branch}.head.b1']))
        return linear(hidden, p[f'{branch}.head.w2'], p[f'{branch}.head.b2'])

    def _with_stop(self, branch, tokens):
        stop = reshape(self.params[f'{branch}.stop'], (1, self.cfg.hidden_dim))
        return concat([stop, tokens], axis=0)

    def distance_bias(self, hops):
        """M = E * w_e + b_e over [stop; nodes]; the stop token sits at distance 0."""
        hops = np.asarray(hops, dtype=np.float64)
        padded = np.zeros((len(hops) + 1, len(hops) + 1))
        padded[1:, 1:] = hops
        return Tensor(padded) * self.params['coarse.w_e'] + self.params['coarse.b_e']

    def gasa_layer(self, tokens, hops):
        """Graph-aware self-attention over tokens that already include the stop row."""
        return self._attend('coarse.self', tokens, tokens, bias=self.distance_bias(hops))

    # Branches

    def coarse_branch(self, features, categories, hops, instr_tokens):
        """Scores for [stop; nodes] and the encoded stop token."""
        features = np.asarray(features, dtype=np.float64)
        type_index = np.array([CATEGORIES.index(c) for c in categories], dtype=int)
        nodes = Tensor(features) @ self.params['coarse.w_x'] + take(self.params['coarse.type'], type_index)
        tokens = self._attend('coarse.cross', self._with_stop('coarse', nodes), instr_tokens)
        tokens = self.gasa_layer(tokens, hops)
        return self._head('coarse', tokens), tokens[0]

    def fine_branch(self, views, instr_tokens):
        """Scores for [stop; views] and the encoded stop token."""
        views = np.asarray(views, dtype=np.float64)
        tokens = self._with_stop('fine', Tensor(views) @ self.params['fine.w_r'])
        tokens = self._attend('fine.cross', tokens, instr_tokens)
        tokens = self._attend('fine.self', tokens, tokens)
        return self._head('fine', tokens), tokens[0]

    def history_tokens(self, episodic, members):
        """u_j for every member of V_h, in the configured representation."""
        p, c = self.params, self.cfg
        rows = []
        for viewpoint in members:
            x = Tensor(episodic.feature(viewpoint))
            attached = episodic.attachments(viewpoint)
            observed = x @ p['history.w_x']
            if not attached or c.history_repr == 'observation':
                rows.append(observed)
                continue
            states = np.stack([s for s, _ in attached])
            mixture = _mixture_weights([score for _, score in attached], c.zeta) @ states
            mixed = Tensor(mixture) @ p['history.w_z']
            rows.append(mixed if c.history_repr == 'state' else mixed + observed)
        return concat([reshape(r, (1, c.hidden_dim)) for r in rows], axis=0)

    def history_branch(self, episodic, members, instr_tokens):
        tokens = self._with_stop('history', self.history_tokens(episodic, members))
        tokens = self._attend('history.cross', tokens, instr_tokens)
        tokens = self._attend('history.self', tokens, tokens)
        return self._head('history', tokens), tokens[0]

    def fusion_weights(self, fine_stop, coarse_stop, history_stop):
        joined = concat([fine_stop, coarse_stop, history_stop], axis=-1)
        return softmax(linear(joined, self.params['fusion.w'], self.params['fusion.b']))

    # Decision

    def decide(self, episodic, observation, instruction):
        """Score STOP and every unvisited node of the episodic graph."""
        current = episodic.current
        if current is None:
            raise ValueError("episodic graph has no current viewpoint")
        instr_tokens = self.instruction_tokens(instruction)
        nodes = episodic.nodes()
        node_index = {v: i + 1 for i, v in enumerate(nodes)}
        candidates = [STOP] + episodic.candidates()

        coarse, coarse_stop = self.coarse_branch(
            np.stack([episodic.feature(v) for v in nodes]),
            [episodic.category(v) for v in nodes], episodic.hop_matrix(nodes), instr_tokens)

        directions = observation.neighbor_directions
        view_scores, fine_stop = self.fine_branch(observation.views, instr_tokens)
        visited_neighbors = [v for v in sorted(directions) if v in episodic
                             and episodic.category(v) == 'visited']
        if visited_neighbors:
            view_index = np.array([directions[v] + 1 for v in visited_neighbors], dtype=int)
            s_back = reshape(logsumexp(take(view_scores, view_index), axis=0), (1,))
        else:
            s_back = Tensor(np.array([-np.inf]))
        fine_ext = concat([view_scores, s_back], axis=0)
        back_slot = len(view_scores.data)

        members = [v for v in nodes if episodic.category(v) in ('visited', 'current')
                   or episodic.attachments(v)]
        history, history_stop = self.history_branch(episodic, members, instr_tokens)
        history_ext = concat([history, reshape(self.params['history.s0'], (1,))], axis=0)
        member_index = {v: i + 1 for i, v in enumerate(members)}
        abstain_slot = len(members) + 1

        coarse_idx, fine_idx, history_idx = [], [], []
        for candidate in candidates:
            if candidate == STOP:
                coarse_idx.append(0)
                fine_idx.append(0)
                history_idx.append(0)
                continue
            coarse_idx.append(node_index[candidate])
            if candidate in directions:
                if not 0 <= directions[candidate] < len(observation.views):
                    raise ShapeError(f"neighbor {candidate} has no valid direction index")
                fine_idx.append(directions[candidate] + 1)
            else:
                fine_idx.append(back_slot)
            history_idx.append(member_index.get(candidate, abstain_slot))

        coarse_c = take(coarse, np.array(coarse_idx))
        fine_c = take(fine_ext, np.array(fine_idx))
        history_c = take(history_ext, np.array(history_idx))
        sigma = self.fusion_weights(fine_stop, coarse_stop, history_stop)

        finite = np.flatnonzero(np.isfinite(fine_c.data))
        logits = (sigma[0] * take(fine_c, finite) + sigma[1] * take(coarse_c, finite)
                  + sigma[2] * take(history_c, finite))
        final = np.full(len(candidates), -np.inf)
        final[finite] = logits.data
        weights = FusionWeights(*(float(w) for w in sigma.data))
        return NavDecision(candidates, coarse_c.data.copy(), fine_c.data.copy(), history_c.data.copy(),
                           weights, final, logits, finite)


def fuse(weights, coarse, fine, history):
    """s_j = sigma_f * fine + sigma_c * coarse + sigma_h * history, -inf kept where fine is -inf."""
    coarse, fine, history = (np.asarray(a, dtype=np.float64) for a in (coarse, fine, history))
    final = np.full(fine.shape, -np.inf)
    finite = np.isfinite(fine)
    final[finite] = (weights.sigma_f * fine[finite] + weights.sigma_c * coarse[finite]
                     + weights.sigma_h * history[finite])
    return final


def imitation_loss(decision, target):
    """Cross-entropy of the expert target over the selectable candidates, or None."""
    if target not in decision.candidates:
        return None
    position = decision.candidates.index(target)
    slots = np.flatnonzero(decision.finite_index == position)
    if len(slots) == 0:
        return None
    return -take(log_softmax(decision.logits), int(slots[0]))

