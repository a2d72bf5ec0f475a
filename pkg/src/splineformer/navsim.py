"""2D kinematic guidewire navigation, a scripted expert, behavior cloning and evaluation.

Lengths are in the unit-square coordinates of :mod:`synthdata`; one unit
stands for 200 mm, so the 2 mm maximum advance is 0.01.
"""

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .bspline import fit_spline, polyline_length, resample_polyline, sample_equal_chord
from .errors import DomainError
from .model import to_spline
from .synthdata import _arclength, point_segment_distance, render, wire_polyline, write_pgm

log = logging.getLogger(__name__)

TARGETS = ("bca", "lcca")


@dataclass(frozen=True)
class NavConfig:
    step_size: float = 0.01
    rotate_deg: float = 15.0
    success_radius: float = 0.015
    step_budget: int = 500
    reset_fraction: float = 0.15
    reset_jitter: float = 0.5  # wire jitter scale at reset, see synthdata.wire_polyline
    reset_heading_deg: float = 5.0
    target_fraction: float = 0.72  # of the branch length
    tip_segment: float = 0.025  # distal segment drawn along the heading
    image_size: int = 64
    contrast: float = 0.6
    noise_sigma: float = 0.02
    wire_spacing: float = 0.005
    control_spacing: float = 0.05
    max_ctrl: int = 24

    def to_dict(self):
        return dict(self.__dict__)


def wrap_angle(a):
    """Angle mapped into (-pi, pi]."""
    a = math.fmod(a + math.pi, 2 * math.pi)
    if a <= 0:
        a += 2 * math.pi
    return a - math.pi


def clamp_action(action):
    a = np.nan_to_num(np.asarray(action, dtype=np.float64).reshape(2), nan=0.0)
    return np.clip(a, -1.0, 1.0)


def _nearest(line, point):
    """Index of the closest vertex and distance to the polyline."""
    i = int(np.argmin(np.sum((line - point) ** 2, axis=1)))
    return i, float(point_segment_distance(point[None], line)[0])


def _tangent(line, i):
    t = line[min(i + 1, len(line) - 1)] - line[max(i - 1, 0)]
    return t / np.linalg.norm(t)


@dataclass(eq=False)
class NavState:
    tip_position: np.ndarray
    heading: float
    inserted_length: float
    path: np.ndarray  # entry point to tip
    vessel: str
    target: str
    steps: int = 0
    seed: int = 0
    min_length: float = 0.0
    env: "NavEnv" = field(default=None, repr=False)
    _wire: object = field(default=None, repr=False)
    _frame: object = field(default=None, repr=False)

    @property
    def wire(self):
        if self._wire is None:
            self._wire = self.env.wire(self)
        return self._wire

    @property
    def frame(self):
        if self._frame is None:
            self._frame = self.env.frame(self)
        return self._frame

    def snapshot(self):
        return {"tip": self.tip_position.tolist(), "heading": self.heading,
                "inserted_length": self.inserted_length, "vessel": self.vessel}


@dataclass
class EpisodeResult:
    success: bool
    steps: int
    trajectory: list
    target: str = "bca"


class NavEnv:
    """Wall-sliding tip kinematics inside the union of the vessel lumens."""

    def __init__(self, vmap, config=NavConfig()):
        self.map = vmap
        self.config = config
        self._arc = {name: _arclength(line) for name, line in vmap.centerlines.items()}

    def target_point(self, target):
        self._check_target(target)
        line, s = self.map.centerlines[target], self._arc[target]
        at = self.config.target_fraction * s[-1]
        return np.array([np.interp(at, s, line[:, 0]), np.interp(at, s, line[:, 1])])

    def _check_target(self, target):
        if target not in TARGETS or target not in self.map.centerlines:
            raise DomainError(f"unknown target branch {target!r}")

    def reset(self, target="bca", seed=0):
        self._check_target(target)
        cfg = self.config
        rng = np.random.default_rng([seed, 1])
        path = wire_polyline(self.map, cfg.reset_fraction, "none", int(rng.integers(2 ** 31)),
                             jitter=cfg.reset_jitter)[::-1]
        trunk = self.map.trunk
        i, _ = _nearest(trunk, path[-1])
        t = _tangent(trunk, i)
        heading = wrap_angle(math.atan2(t[1], t[0])
                             + math.radians(rng.uniform(-cfg.reset_heading_deg, cfg.reset_heading_deg)))
        length = polyline_length(path)
        return NavState(path[-1].copy(), heading, length, path, "trunk", target, 0, seed, length, self)

    # kinematics -------------------------------------------------------------

    def containing(self, point):
        """Vessels whose lumen contains ``point``, with the nearest centerline vertex of each."""
        found = {}
        for name, line in self.map.centerlines.items():
            i, d = _nearest(line, point)
            if d <= self.map.lumen_radius[name]:
                found[name] = i
        return found

    def _constrain(self, point, heading, vessel):
        inside = self.containing(point)
        if inside:
            if vessel in inside and len(inside) == 1:
                return point, vessel
            # at a bifurcation, enter the vessel whose forward tangent best matches the heading
            h = np.array([math.cos(heading), math.sin(heading)])
            best = max(inside, key=lambda v: (float(_tangent(self.map.centerlines[v], inside[v]) @ h), v))
            return point, best
        # wall sliding: back onto the lumen boundary of the current vessel
        line = self.map.centerlines[vessel]
        seg_a, seg_b = line[:-1], line[1:]
        ab = seg_b - seg_a
        t = np.clip(np.sum((point - seg_a) * ab, axis=1) / np.sum(ab * ab, axis=1), 0.0, 1.0)
        proj = seg_a + t[:, None] * ab
        k = int(np.argmin(np.sum((point - proj) ** 2, axis=1)))
        off = point - proj[k]
        r = self.map.lumen_radius[vessel] * (1.0 - 1e-9)
        return proj[k] + off * (r / np.linalg.norm(off)), vessel

    def step(self, state, action):
        """Apply one action; returns ``(new state, done, success)``."""
        cfg = self.config
        translate, rotate = clamp_action(action)
        heading = wrap_angle(state.heading + rotate * math.radians(cfg.rotate_deg))
        tip, path, vessel = state.tip_position, state.path, state.vessel
        if translate > 0:
            move = translate * cfg.step_size * np.array([math.cos(heading), math.sin(heading)])
            new, vessel = self._constrain(tip + move, heading, vessel)
            if np.linalg.norm(new - tip) > 1e-12:
                if np.linalg.norm(new - tip - move) > 1e-12:
                    heading = self._wall_align(state.heading, heading, new - tip)
                path = np.vstack([path, new])
                tip = new
        elif translate < 0:
            path = self._retract(path, -translate * cfg.step_size, state.min_length)
            tip = path[-1].copy()
            inside = self.containing(tip)
            if not inside:
                # an interpolated point on a chord across a bend; put it back on the wall
                tip, _ = self._constrain(tip, heading, vessel)
                path[-1] = tip
            elif vessel not in inside:
                vessel = min(inside, key=lambda v: (_nearest(self.map.centerlines[v], tip)[1]
                                                    / self.map.lumen_radius[v], v))
        length = polyline_length(path)
        new_state = replace(state, tip_position=tip, heading=heading, inserted_length=length, path=path,
                            vessel=vessel, steps=state.steps + 1, _wire=None, _frame=None)
        success = bool(np.linalg.norm(tip - self.target_point(state.target)) <= cfg.success_radius)
        done = success or new_state.steps >= cfg.step_budget
        return new_state, done, success

    def _wall_align(self, before, heading, moved):
        """Turn the heading toward the sliding direction within what is left of the per-step turn limit."""
        limit = math.radians(self.config.rotate_deg)
        left = limit - abs(wrap_angle(heading - before))
        turn = wrap_angle(math.atan2(moved[1], moved[0]) - heading)
        return wrap_angle(heading + float(np.clip(turn, -left, left)))

    @staticmethod
    def _retract(path, distance, min_length):
        s = _arclength(path)
        keep = max(s[-1] - distance, min_length)
        k = int(np.searchsorted(s, keep, side="right"))
        if k >= len(path):
            return path.copy()
        frac = (keep - s[k - 1]) / (s[k] - s[k - 1])
        end = path[k - 1] + frac * (path[k] - path[k - 1])
        return np.vstack([path[:k], end]) if frac > 1e-12 else path[:k].copy()

    # observation ------------------------------------------------------------

    def wire(self, state):
        """Tip-first spline through the tip segment and the swept path."""
        cfg = self.config
        h = np.array([math.cos(state.heading), math.sin(state.heading)])
        pts = np.vstack([state.path, state.tip_position + cfg.tip_segment * h])[::-1]
        pts = resample_polyline(pts, spacing=cfg.wire_spacing)
        n_ctrl = int(np.clip(round(polyline_length(pts) / cfg.control_spacing), 4, cfg.max_ctrl))
        return fit_spline(pts, n_ctrl=n_ctrl, iterations=0)

    def frame(self, state):
        cfg = self.config
        seed = int(np.random.default_rng([state.seed, 2, state.steps]).integers(2 ** 31))
        poly = sample_equal_chord(state.wire, 200)
        return render(self.map, poly, cfg.image_size, cfg.image_size, cfg.contrast, cfg.noise_sigma, seed)

    def route(self, target):
        """Centerline path from the entry to the target point."""
        route = self.map.route(target)
        s = _arclength(route)
        goal = self.target_point(target)
        end = int(np.argmin(np.sum((route - goal) ** 2, axis=1)))
        return np.vstack([route[:end], goal]), s


# policies -----------------------------------------------------------------

EXPERT_LOOKAHEAD = 0.04
EXPERT_ALIGN_DEG = 30.0


def scripted_expert(env, state, target=None):
    """Pure pursuit along the centerline route to the target.

    Rotates toward a point ``EXPERT_LOOKAHEAD`` ahead on the route, advancing
    fully only when within ``EXPERT_ALIGN_DEG``; retracts when the tip is in a
    vessel off the route or has passed the target branch along the trunk.
    """
    target = state.target if target is None else target
    vmap = env.map
    if state.vessel not in ("trunk", target):
        return np.array([-1.0, 0.0])
    if state.vessel == "trunk":
        i, _ = _nearest(vmap.trunk, state.tip_position)
        if env._arc["trunk"][i] > env._arc["trunk"][vmap.attach_index[target]] + vmap.lumen_radius["trunk"]:
            return np.array([-1.0, 0.0])
    route = env.route(target)[0]
    s = _arclength(route)
    i, _ = _nearest(route, state.tip_position)
    at = min(s[i] + EXPERT_LOOKAHEAD, s[-1])
    look = np.array([np.interp(at, s, route[:, 0]), np.interp(at, s, route[:, 1])])
    d = look - state.tip_position
    err = wrap_angle(math.atan2(d[1], d[0]) - state.heading)
    rotate = float(np.clip(err / math.radians(env.config.rotate_deg), -1.0, 1.0))
    translate = 1.0 if abs(err) <= math.radians(EXPERT_ALIGN_DEG) else 0.0
    return np.array([translate, rotate])


def target_onehot(target):
    if target not in TARGETS:
        raise DomainError(f"unknown target branch {target!r}")
    return np.array([float(t == target) for t in TARGETS])


def spline_features(points, knots, terminated, max_seq_len):
    """``[x, y, knot]`` per token, zero padded or truncated to ``max_seq_len`` tokens, then the flag."""
    n = min(len(points), max_seq_len)
    out = np.zeros(3 * max_seq_len + 1)
    out[:3 * n] = np.column_stack([points[:n], knots[:n]]).ravel()
    out[-1] = float(terminated)
    return out


def condensed_repr(model, frames):
    """Fixed-length policy features from the model's spline prediction.

    The tokens of the clamped spline (control points and the leading knots)
    pass through :func:`spline_features`. Accepts one frame or a batch.
    """
    frames = np.asarray(frames)
    single = frames.ndim == 2
    seqs = model.generate(frames[None] if single else frames)
    S = model.config.max_seq_len
    out = np.zeros((len(seqs), 3 * S + 1))
    for b, seq in enumerate(seqs):
        if len(seq) >= 4:
            curve = to_spline(seq)
            points, knots = curve.control_points, curve.knots[:len(seq)]
        else:
            points, knots = np.clip(seq.points, 0.0, 1.0), np.clip(seq.knots, 0.0, 1.0)
        out[b] = spline_features(points, knots, seq.terminated, S)
    return out[0] if single else out


def wire_features(state, max_seq_len=24):
    """The :func:`condensed_repr` layout built from the true wire instead of a prediction."""
    curve = state.wire
    return spline_features(curve.control_points, curve.knots[:curve.n_ctrl], True, max_seq_len)


class ExpertPolicy:
    needs_features = False

    def __call__(self, env, state, features=None):
        return scripted_expert(env, state)


class RandomPolicy:
    """Uniform actions; each episode draws from its own stream keyed by its reset seed."""
    needs_features = False

    def __init__(self, seed=0):
        self.seed = seed
        self._rngs = {}

    def __call__(self, env, state, features=None):
        rng = self._rngs.setdefault(state.seed, np.random.default_rng([self.seed, state.seed]))
        return rng.uniform(-1.0, 1.0, 2)


@dataclass
class BCPolicy:
    """Two-hidden-layer ReLU perceptron over standardized features, tanh outputs."""
    params: dict
    mean: np.ndarray
    std: np.ndarray
    needs_features = True

    def act(self, features, targets):
        x = (np.column_stack([np.atleast_2d(features), np.atleast_2d(targets)]) - self.mean) / self.std
        with ad.no_grad():
            y = _mlp(self.params, ad.Tensor(x)).data
        return y

    def __call__(self, env, state, features):
        return self.act(features, target_onehot(state.target))[0]

    def save(self, path):
        tensors = {k: p.data for k, p in self.params.items()}
        tensors.update({"norm.mean": self.mean, "norm.std": self.std})
        ad.write_checkpoint(path, tensors, {"kind": "bc_policy"})

    @classmethod
    def load(cls, path):
        header, tensors = ad.read_checkpoint(path)
        if header.get("kind") != "bc_policy":
            raise DomainError(f"{path}: not a policy checkpoint")
        mean = tensors.pop("norm.mean").astype(np.float64)
        std = tensors.pop("norm.std").astype(np.float64)
        params = {k: ad.Tensor(v.astype(np.float64), requires_grad=True) for k, v in tensors.items()}
        return cls(params, mean, std)


def _mlp(params, x):
    h = ad.relu(ad.matmul(x, params["fc1.w"]) + params["fc1.b"])
    h = ad.relu(ad.matmul(h, params["fc2.w"]) + params["fc2.b"])
    return ad.tanh(ad.matmul(h, params["out.w"]) + params["out.b"])


def bc_act(policy, condensed, target):
    """Action in [-1, 1]^2 for one feature vector and a target name or one-hot."""
    onehot = target_onehot(target) if isinstance(target, str) else np.asarray(target, dtype=np.float64)
    return policy.act(condensed, onehot)[0]


def bc_train(features, targets, actions, seed=0, epochs=200, hidden=128, lr=1e-3, batch_size=64,
             history=None):
    """Fit a :class:`BCPolicy` by minibatch Adam on squared action error.

    ``targets`` are one-hot rows. ``history``, if a list, receives the mean
    training loss of each epoch.
    """
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if len(features) == 0:
        raise DomainError("no demonstrations to train on")
    x = np.column_stack([features, np.asarray(targets, dtype=np.float64)])
    y = np.asarray(actions, dtype=np.float64)
    if len(x) != len(y):
        raise DomainError("features and actions differ in length")
    mean = x.mean(axis=0)
    std = np.where(x.std(axis=0) > 1e-8, x.std(axis=0), 1.0)
    xn = (x - mean) / std
    rng = np.random.default_rng(seed)
    sizes = [(x.shape[1], hidden), (hidden, hidden), (hidden, 2)]
    params = {}
    for name, (i, o) in zip(("fc1", "fc2", "out"), sizes):
        params[name + ".w"] = ad.Tensor(rng.normal(0.0, math.sqrt(2.0 / i), (i, o)), requires_grad=True)
        params[name + ".b"] = ad.Tensor(np.zeros(o), requires_grad=True)
    opt = ad.Adam(params, lr=lr)
    for _ in range(epochs):
        order = rng.permutation(len(xn))
        total = 0.0
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            diff = _mlp(params, ad.Tensor(xn[idx])) - y[idx]
            loss = (diff * diff).sum() * (1.0 / len(idx))
            grads = ad.backward(loss)
            opt.step({n: grads[p] for n, p in params.items()})
            total += float(loss.data) * len(idx)
        if history is not None:
            history.append(total / len(xn))
    return BCPolicy(params, mean, std)


# episodes -----------------------------------------------------------------

def run_episodes(env, policy, target, seeds, model=None, step_budget=None, record=False):
    """Closed-loop episodes run in lockstep so feature extraction is batched across them."""
    budget = env.config.step_budget if step_budget is None else step_budget
    if budget < 1:
        raise DomainError("step budget must be at least 1")
    if policy.needs_features and model is None:
        raise DomainError("this policy needs a model for its features")
    states = [env.reset(target, s) for s in seeds]
    results = [EpisodeResult(False, 0, [], target) for _ in seeds]
    active = list(range(len(seeds)))
    frames_log = [[] for _ in seeds]
    while active:
        feats = {}
        if policy.needs_features or record:
            frames = np.stack([states[i].frame for i in active])
            if model is not None:
                feats = dict(zip(active, condensed_repr(model, frames)))
        still = []
        for i in active:
            action = clamp_action(policy(env, states[i], feats.get(i)))
            if record:
                frames_log[i].append((states[i].frame, feats.get(i)))
            results[i].trajectory.append((states[i].snapshot(), action))
            states[i], done, success = env.step(states[i], action)
            results[i].steps = states[i].steps
            if success:
                results[i].success = True
            if not done and states[i].steps < budget:
                still.append(i)
        active = still
    return (results, frames_log) if record else results


def evaluate(policy, model, env, target="bca", n_trials=20, step_budget=None, seed=0):
    """Success rate and step statistics (over successful episodes only)."""
    seeds = [int(s) for s in np.random.default_rng([seed, 3]).integers(0, 2 ** 31, n_trials)]
    results = run_episodes(env, policy, target, seeds, model, step_budget)
    return summarize(results, target)


def summarize(results, target):
    """Evaluation report; step statistics cover successful episodes only."""
    steps = [r.steps for r in results if r.success]
    return {
        "success_rate": sum(r.success for r in results) / len(results),
        "mean_steps": float(np.mean(steps)) if steps else None,
        "std_steps": float(np.std(steps)) if steps else None,
        "n_trials": len(results),
        "target": target,
    }


def collect_demos(env, target, n_trials, seed=0, model=None, out_dir=None, action_noise=0.0):
    """Expert episodes; failed episodes are dropped.

    Returns frames, model features (``None`` without a model), the same
    features built from the true wire, expert actions and one-hot targets.

    With ``action_noise`` the executed action is perturbed by Gaussian noise
    while the recorded label stays the expert's, which exposes the learner
    to recoverable off-route states. With ``out_dir`` the records are also
    written as PGM frames and a ``demos.jsonl`` index.
    """
    if n_trials < 1:
        raise DomainError("n_trials must be at least 1")
    seeds = [int(s) for s in np.random.default_rng([seed, 4]).integers(0, 2 ** 31, n_trials)]
    frames, actions, oracle = [], [], []
    kept = 0
    for trial, s in enumerate(seeds):
        rng = np.random.default_rng([seed, 5, trial])
        state = env.reset(target, s)
        ep_frames, ep_actions, ep_oracle = [], [], []
        done = success = False
        while not done:
            label = scripted_expert(env, state)
            executed = clamp_action(label + action_noise * rng.standard_normal(2)) if action_noise else label
            ep_frames.append(state.frame)
            ep_actions.append(label)
            ep_oracle.append(wire_features(state))
            state, done, success = env.step(state, executed)
        if success:
            frames += ep_frames
            actions += ep_actions
            oracle += ep_oracle
            kept += 1
        else:
            log.warning("expert failed on %s trial %d (seed %d); episode dropped", target, trial, s)
    frames = np.array(frames) if frames else np.zeros((0, env.config.image_size, env.config.image_size))
    actions = np.array(actions).reshape(-1, 2)
    features = _batched_features(model, frames) if model is not None else None
    onehots = np.tile(target_onehot(target), (len(actions), 1))
    if out_dir is not None:
        write_demos(out_dir, frames, features, actions, target)
    return {"frames": frames, "features": features, "wire_features": np.array(oracle).reshape(len(actions), -1),
            "actions": actions, "targets": onehots,
            "n_success": kept, "n_trials": n_trials, "target": target}


def _batched_features(model, frames, batch=64):
    if len(frames) == 0:
        return np.zeros((0, 3 * model.config.max_seq_len + 1))
    return np.concatenate([condensed_repr(model, frames[i:i + batch]) for i in range(0, len(frames), batch)])


def write_demos(out_dir, frames, features, actions, target, append=True):
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    index = out / "demos.jsonl"
    start = sum(1 for _ in open(index)) if append and index.exists() else 0
    with open(index, "a" if append else "w") as fh:
        for k, (frame, action) in enumerate(zip(frames, actions)):
            name = f"frames/{start + k:06d}.pgm"
            write_pgm(out / name, frame)
            rec = {"frame_file": name, "condensed": None if features is None else features[k].tolist(),
                   "action": [float(a) for a in action], "target": target}
            fh.write(json.dumps(rec) + "\n")


def read_demos(path):
    """``(features, one-hot targets, actions)`` from a ``demos.jsonl`` file or its directory."""
    path = Path(path)
    if path.is_dir():
        path = path / "demos.jsonl"
    recs = [json.loads(line) for line in path.read_text().splitlines() if line]
    if not recs:
        raise DomainError(f"{path}: no demonstrations")
    if any(r["condensed"] is None for r in recs):
        raise DomainError(f"{path}: demonstrations lack condensed features")
    return (np.array([r["condensed"] for r in recs]), np.array([target_onehot(r["target"]) for r in recs]),
            np.array([r["action"] for r in recs]))
