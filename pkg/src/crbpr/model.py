"""The CR-BPR scorer: parameters, per-branch representations and score fusion."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import gradcore as gc
from .data import Catalog, DataError, FeatureStore, read_tensor_bin, write_tensor_bin
from .history import HistoryIndex

BRANCHES = ("p", "m", "cu", "cg")
MODALITIES = ("v", "w")
NORM_MODES = ("batch", "corpus")
_RAW = "raw"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class Hyperparams:
    eta: float = 0.5
    pi: float = 0.5
    mu: float = 0.5
    phi_gc: float = 10.0
    phi_uc: float = 10.0
    lam: float = 1e-5
    N: int = 2
    d_e: int = 32
    d_v: int = 32
    d_w: int = 32
    K: int = 1
    learning_rate: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 80
    patience: int = 8
    seed: int = 0
    feature_scaling: bool = True
    learn_feature_delta: bool = False
    init_scale: float = 0.01

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("eta", "pi", "mu"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        for name in ("phi_gc", "phi_uc", "lam"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        for name in ("N", "d_e", "d_v", "d_w", "K", "batch_size", "max_epochs", "patience"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")

    def replace(self, **overrides) -> "Hyperparams":
        return dataclasses.replace(self, **overrides)


@dataclass
class BranchToggles:
    use_U: bool = True
    use_G: bool = True
    use_UC: bool = True
    use_GC: bool = True
    use_visual: bool = True
    use_textual: bool = True
    use_latent: bool = True

    def __post_init__(self):
        if not (self.use_U or self.use_G or self.use_UC or self.use_GC):
            raise ConfigError("at least one branch must be enabled")
        if not (self.use_visual or self.use_textual) and (self.use_G or self.use_UC or self.use_GC):
            raise ConfigError("content branches need at least one modality")


BASELINES = ("MF-BPR", "V-BPR", "T-BPR", "VT-BPR", "GP-BPR", "CR-BPR")


def reduce_to_baseline(name: str):
    """Hyperparameter overrides and branch toggles that turn CR-BPR into ``name``."""
    user_only = dict(use_G=False, use_UC=False, use_GC=False)
    no_consistency = dict(phi_gc=0.0, phi_uc=0.0)
    if name == "MF-BPR":
        return dict(mu=0.0, **no_consistency), BranchToggles(use_visual=False, use_textual=False, **user_only)
    if name == "V-BPR":
        return dict(mu=0.0, eta=1.0, **no_consistency), BranchToggles(use_textual=False, **user_only)
    if name == "T-BPR":
        return dict(mu=0.0, eta=0.0, **no_consistency), BranchToggles(use_visual=False, **user_only)
    if name == "VT-BPR":
        return dict(mu=0.0, **no_consistency), BranchToggles(**user_only)
    if name == "GP-BPR":
        return dict(no_consistency), BranchToggles(use_UC=False, use_GC=False)
    if name == "CR-BPR":
        return {}, BranchToggles()
    raise ConfigError(f"unknown baseline {name!r}; expected one of {', '.join(BASELINES)}")


# ---------------------------------------------------------------------------
# plain-array score formulas
# ---------------------------------------------------------------------------


def _dot(a, b):
    return np.einsum("ij,ij->i", np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64))


def user_pref_score(eu, er, vu, vr, wu, wr, beta_u, beta_r, alpha, eta):
    """Latent affinity + eta-weighted visual/textual affinity + biases + offset."""
    return _dot(eu, er) + eta * _dot(vu, vr) + (1 - eta) * _dot(wu, wr) + beta_u + beta_r + alpha


def matching_score(vg, vr, wg, wr, pi):
    return pi * _dot(vg, vr) + (1 - pi) * _dot(wg, wr)


def consistency_score(list_v, list_w, target_v, target_w, pi):
    """Mean of the list members' reps (shape (n, N, d)) dotted with the target reps."""
    mv = np.asarray(list_v, dtype=np.float64).mean(axis=1)
    mw = np.asarray(list_w, dtype=np.float64).mean(axis=1)
    return pi * _dot(mv, target_v) + (1 - pi) * _dot(mw, target_w)


def fuse_scores(s_gr, s_ur, s_gc, s_uc, mu, phi_gc, phi_uc):
    return mu * s_gr + (1 - mu) * s_ur + phi_gc * s_gc + phi_uc * s_uc


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------


def param_shapes(n_users, n_givens, n_matchers, in_v, in_w, hp: Hyperparams):
    shapes = {
        "E_U": (n_users, hp.d_e),
        "E_I": (n_givens + n_matchers, hp.d_e),
        "V_U": (n_users, hp.d_v),
        "W_U": (n_users, hp.d_w),
        "beta_u": (n_users,),
        "beta_r": (n_matchers,),
        "alpha": (1,),
    }
    for branch in BRANCHES:
        for mod, d_in, d_out in (("v", in_v, hp.d_v), ("w", in_w, hp.d_w)):
            for k in range(1, hp.K + 1):
                shapes[f"mlp.{branch}.{mod}.layer{k}.W"] = (d_out, d_in if k == 1 else d_out)
                shapes[f"mlp.{branch}.{mod}.layer{k}.b"] = (d_out,)
    if hp.learn_feature_delta:
        shapes["delta.v"] = (n_givens + n_matchers, in_v)
        shapes["delta.w"] = (n_givens + n_matchers, in_w)
    return shapes


def _is_bias(name):
    return name in ("beta_u", "beta_r", "alpha") or name.endswith(".b") or name.startswith("delta.")


class _Pass:
    """Per-forward bookkeeping: one tape leaf per parameter, normalization dispatch."""

    def __init__(self, model, norm_mode, grad):
        if norm_mode not in NORM_MODES and norm_mode != _RAW:
            raise ConfigError(f"norm_mode must be one of {NORM_MODES}, got {norm_mode!r}")
        self.model = model
        self.norm_mode = norm_mode
        self.grad = grad
        self.leaves = {}
        self.corpus = model.corpus_stats() if norm_mode == "corpus" and model.hp.feature_scaling else None

    def p(self, name):
        node = self.leaves.get(name)
        if node is None:
            param = self.model.params[name]
            node = gc.leaf(param) if self.grad else gc.const(param.value)
            self.leaves[name] = node
        return node

    def norm(self, node, site):
        if not self.model.hp.feature_scaling or self.norm_mode == _RAW:
            return node
        if self.norm_mode == "batch":
            return gc.scale_rows_of_batch(node)
        return gc.divide_by(node, self.corpus[site])


class CRBPR:
    """Scores (user, given, matcher) triplets with the four-branch fusion.

    Products are addressed by catalog index: given products as indices into
    ``catalog.givens`` and candidates as indices into ``catalog.matchers``.
    """

    def __init__(self, catalog: Catalog, features: FeatureStore, index: HistoryIndex | None = None,
                 hp: Hyperparams | None = None, toggles: BranchToggles | None = None,
                 exclude_target: bool = True):
        self.catalog = catalog
        self.hp = hp or Hyperparams()
        self.toggles = toggles or BranchToggles()
        self.index = index
        self.exclude_target = exclude_target
        g_rows = features.rows_for(catalog.givens)
        r_rows = features.rows_for(catalog.matchers)
        self.feat = {
            ("v", "given"): features.visual[g_rows].astype(np.float64),
            ("w", "given"): features.textual[g_rows].astype(np.float64),
            ("v", "matcher"): features.visual[r_rows].astype(np.float64),
            ("w", "matcher"): features.textual[r_rows].astype(np.float64),
        }
        self.in_dims = {"v": features.d_v, "w": features.d_w}
        self.n_users = len(catalog.users)
        self.n_givens = len(catalog.givens)
        self.n_matchers = len(catalog.matchers)
        self.params: dict[str, gc.Param] = {}
        self.init_params(self.hp.seed)
        self.version = 0
        self._corpus = None
        self._corpus_version = -1

    # -- parameters ---------------------------------------------------------

    def init_params(self, seed):
        rng = np.random.default_rng(seed)
        shapes = param_shapes(self.n_users, self.n_givens, self.n_matchers,
                              self.in_dims["v"], self.in_dims["w"], self.hp)
        s = self.hp.init_scale
        self.params = {}
        for name, shape in shapes.items():
            if _is_bias(name):
                value = np.zeros(shape, dtype=np.float32)
            else:
                value = rng.uniform(-s, s, size=shape).astype(np.float32)
            self.params[name] = gc.Param(name, value)
        self.version = getattr(self, "version", 0) + 1

    def mark_updated(self):
        self.version += 1

    def enabled_param_names(self):
        t = self.toggles
        names = []
        mods = [m for m, on in (("v", t.use_visual), ("w", t.use_textual)) if on]

        def mlp(branch, mod):
            return [n for n in self.params if n.startswith(f"mlp.{branch}.{mod}.")]

        if t.use_U:
            if t.use_latent:
                names += ["E_U", "E_I"]
            if t.use_visual:
                names += ["V_U"] + mlp("p", "v")
            if t.use_textual:
                names += ["W_U"] + mlp("p", "w")
            names += ["beta_u", "beta_r", "alpha"]
        for flag, branch in ((t.use_G, "m"), (t.use_UC, "cu"), (t.use_GC, "cg")):
            if flag:
                for mod in mods:
                    names += mlp(branch, mod)
        if self.hp.learn_feature_delta:
            names += [f"delta.{m}" for m in mods]
        return names

    def enabled_params(self):
        return [self.params[n] for n in self.enabled_param_names()]

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    # -- representations ----------------------------------------------------

    def _features(self, ps: _Pass, mod, kind, idx):
        x = gc.const(self.feat[(mod, kind)][idx])
        if self.hp.learn_feature_delta:
            offset = 0 if kind == "given" else self.n_givens
            x = gc.add_feature_delta(x, gc.gather(ps.p(f"delta.{mod}"), np.asarray(idx) + offset))
        return x

    def _mlp(self, ps: _Pass, branch, mod, x):
        for k in range(1, self.hp.K + 1):
            x = gc.dense_sigmoid(x, ps.p(f"mlp.{branch}.{mod}.layer{k}.W"), ps.p(f"mlp.{branch}.{mod}.layer{k}.b"))
        return x

    def _rep(self, ps: _Pass, branch, mod, kind, idx, site):
        return ps.norm(self._mlp(ps, branch, mod, self._features(ps, mod, kind, idx)), site)

    def represent(self, idx, branch, modality, norm_mode="batch", kind="matcher", site=None):
        """Scaled branch representation (len(idx), d*) of products ``idx``."""
        if branch not in BRANCHES or modality not in MODALITIES:
            raise ConfigError(f"unknown branch/modality {branch!r}/{modality!r}")
        idx = self._check_idx(idx, kind)
        ps = _Pass(self, norm_mode, grad=False)
        site = site or f"{branch}.{modality}.{'g' if kind == 'given' else 'r'}"
        return self._rep(ps, branch, modality, kind, idx, site).value

    def _check_idx(self, idx, kind):
        idx = np.asarray(idx, dtype=np.int64)
        n = {"user": self.n_users, "given": self.n_givens, "matcher": self.n_matchers}[kind]
        if idx.size and (idx.min() < 0 or idx.max() >= n):
            raise DataError(f"{kind} index out of range (0..{n - 1})")
        return idx

    # -- corpus statistics --------------------------------------------------

    def corpus_stats(self):
        """Per-dimension divisors that stand in for batch norms at evaluation time.

        Each divisor is the corpus root-mean-square of that dimension times
        the square root of the row count the site sees in a training batch,
        so corpus-normalized reps have the same scale as batch-normalized ones.
        """
        if self._corpus is not None and self._corpus_version == self.version:
            return self._corpus
        ps = _Pass(self, _RAW, grad=False)
        l_pair = 2 * self.hp.batch_size
        l_list = l_pair * self.hp.N
        givens = np.arange(self.n_givens)
        matchers = np.arange(self.n_matchers)

        def div(x, l_ref):
            return np.maximum(np.sqrt(np.mean(x * x, axis=0) * l_ref), gc.FS_EPS)

        stats = {
            "E_U": div(self.params["E_U"].value.astype(np.float64), l_pair),
            "E_I.r": div(self.params["E_I"].value[self.n_givens:].astype(np.float64), l_pair),
            "V_U": div(self.params["V_U"].value.astype(np.float64), l_pair),
            "W_U": div(self.params["W_U"].value.astype(np.float64), l_pair),
        }
        for mod in MODALITIES:
            for branch in BRANCHES:
                rep_r = self._rep(ps, branch, mod, "matcher", matchers, None).value
                stats[f"{branch}.{mod}.r"] = div(rep_r, l_pair)
                if branch in ("cu", "cg"):
                    stats[f"{branch}.{mod}.list"] = div(rep_r, l_list)
            rep_g = self._rep(ps, "m", mod, "given", givens, None).value
            stats[f"m.{mod}.g"] = div(rep_g, l_pair)
        self._corpus = stats
        self._corpus_version = self.version
        return stats

    # -- branches -----------------------------------------------------------

    def _user_pref(self, ps, u, r):
        t, hp = self.toggles, self.hp
        terms = []
        if t.use_latent:
            eu = ps.norm(gc.gather(ps.p("E_U"), u), "E_U")
            er = ps.norm(gc.gather(ps.p("E_I"), r + self.n_givens), "E_I.r")
            terms.append((1.0, gc.rowdot(eu, er)))
        if t.use_visual:
            vu = ps.norm(gc.gather(ps.p("V_U"), u), "V_U")
            vr = self._rep(ps, "p", "v", "matcher", r, "p.v.r")
            terms.append((hp.eta, gc.rowdot(vu, vr)))
        if t.use_textual:
            wu = ps.norm(gc.gather(ps.p("W_U"), u), "W_U")
            wr = self._rep(ps, "p", "w", "matcher", r, "p.w.r")
            terms.append((1.0 - hp.eta, gc.rowdot(wu, wr)))
        terms.append((1.0, gc.gather(ps.p("beta_u"), u)))
        terms.append((1.0, gc.gather(ps.p("beta_r"), r)))
        terms.append((1.0, gc.broadcast_scalar(ps.p("alpha"), len(u))))
        return gc.weighted_sum(terms)

    def _modality_terms(self, ps, make_pair):
        t, pi = self.toggles, self.hp.pi
        terms = []
        if t.use_visual:
            terms.append((pi, gc.rowdot(*make_pair("v"))))
        if t.use_textual:
            terms.append((1.0 - pi, gc.rowdot(*make_pair("w"))))
        return gc.weighted_sum(terms)

    def _matching(self, ps, g, r):
        return self._modality_terms(ps, lambda mod: (
            self._rep(ps, "m", mod, "given", g, f"m.{mod}.g"),
            self._rep(ps, "m", mod, "matcher", r, f"m.{mod}.r"),
        ))

    def _consistency(self, ps, branch, r, lists):
        n, N = lists.shape
        flat = lists.reshape(-1)
        return self._modality_terms(ps, lambda mod: (
            gc.group_mean(self._rep(ps, branch, mod, "matcher", flat, f"{branch}.{mod}.list"), n, N),
            self._rep(ps, branch, mod, "matcher", r, f"{branch}.{mod}.r"),
        ))

    def history_lists(self, kind, anchors, targets):
        if self.index is None:
            raise RuntimeError("a HistoryIndex is required for the consistency branches")
        return self.index.lists(kind, anchors, targets, self.hp.N, self.exclude_target)

    def forward(self, u, g, r, norm_mode="batch", grad=False, ur_lists=None, gr_lists=None):
        """Build the fused score on the tape; returns (p_node, {branch: node})."""
        u = self._check_idx(u, "user")
        g = self._check_idx(g, "given")
        r = self._check_idx(r, "matcher")
        if not (len(u) == len(g) == len(r)):
            raise DataError("u, g and r batches must be aligned")
        t, hp = self.toggles, self.hp
        ps = _Pass(self, norm_mode, grad)
        branches = {}
        fused = []
        if t.use_G:
            branches["s_gr"] = self._matching(ps, g, r)
            fused.append((hp.mu, branches["s_gr"]))
        if t.use_U:
            branches["s_ur"] = self._user_pref(ps, u, r)
            fused.append((1.0 - hp.mu, branches["s_ur"]))
        if t.use_GC:
            if gr_lists is None:
                gr_lists = self.history_lists("given", g, r)
            branches["s_gc"] = self._consistency(ps, "cg", r, np.asarray(gr_lists))
            fused.append((hp.phi_gc, branches["s_gc"]))
        if t.use_UC:
            if ur_lists is None:
                ur_lists = self.history_lists("user", u, r)
            branches["s_uc"] = self._consistency(ps, "cu", r, np.asarray(ur_lists))
            fused.append((hp.phi_uc, branches["s_uc"]))
        return gc.weighted_sum(fused), branches, ps

    def score(self, u, g, r, norm_mode="corpus", **lists):
        """Fused score and per-branch breakdown as float32 arrays (disabled branches are 0)."""
        p, branches, _ = self.forward(u, g, r, norm_mode, grad=False, **lists)
        n = len(np.atleast_1d(u))
        out = {"p": p.value.astype(np.float32)}
        for key in ("s_ur", "s_gr", "s_uc", "s_gc"):
            out[key] = branches[key].value.astype(np.float32) if key in branches else np.zeros(n, np.float32)
        return out

    def score_overall(self, u, g, r, norm_mode="corpus", **lists):
        return self.score(u, g, r, norm_mode, **lists)["p"]

    def score_user_pref(self, u, r, norm_mode="corpus"):
        ps = _Pass(self, norm_mode, False)
        return self._user_pref(ps, self._check_idx(u, "user"), self._check_idx(r, "matcher")).value

    def score_matching(self, g, r, norm_mode="corpus"):
        ps = _Pass(self, norm_mode, False)
        return self._matching(ps, self._check_idx(g, "given"), self._check_idx(r, "matcher")).value

    def score_uc(self, u, r, lists=None, norm_mode="corpus"):
        r = self._check_idx(r, "matcher")
        lists = self.history_lists("user", u, r) if lists is None else np.asarray(lists)
        return self._consistency(_Pass(self, norm_mode, False), "cu", r, lists).value

    def score_gc(self, g, r, lists=None, norm_mode="corpus"):
        r = self._check_idx(r, "matcher")
        lists = self.history_lists("given", g, r) if lists is None else np.asarray(lists)
        return self._consistency(_Pass(self, norm_mode, False), "cg", r, lists).value

    # -- loss ---------------------------------------------------------------

    def bpr_forward(self, u, g, r_pos, r_neg, grad=True):
        """Loss node for one minibatch; positives and negatives share one normalization context."""
        u = np.asarray(u, dtype=np.int64)
        g = np.asarray(g, dtype=np.int64)
        B = len(u)
        uu = np.concatenate([u, u])
        gg = np.concatenate([g, g])
        rr = np.concatenate([np.asarray(r_pos, dtype=np.int64), np.asarray(r_neg, dtype=np.int64)])
        p, _, ps = self.forward(uu, gg, rr, "batch", grad=grad)
        p_pos, p_neg = gc.split_rows(p, B)
        diff = gc.weighted_sum([(1.0, p_pos), (-1.0, p_neg)])
        loss = gc.bpr_sum(diff)
        if self.hp.lam > 0:
            reg = gc.half_sq_norm(ps.p(n) for n in self.enabled_param_names())
            loss = gc.weighted_sum([(1.0, loss), (self.hp.lam, reg)])
        return loss, diff

    def loss_and_grad(self, u, g, r_pos, r_neg):
        self.zero_grad()
        loss, diff = self.bpr_forward(u, g, r_pos, r_neg, grad=True)
        value = float(loss.value)
        if not np.isfinite(value):
            raise gc.NumericError("non-finite BPR loss")
        gc.backward(loss)
        gc.check_finite_grads(self.enabled_params())
        return value

    def loss(self, u, g, r_pos, r_neg):
        loss, _ = self.bpr_forward(u, g, r_pos, r_neg, grad=False)
        return float(loss.value)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(model: CRBPR, directory, extra=None):
    directory = Path(directory)
    (directory / "tensors").mkdir(parents=True, exist_ok=True)
    tensors = {}
    for name, p in model.params.items():
        fname = f"tensors/{name}.crft"
        write_tensor_bin(directory / fname, p.value.reshape(p.value.shape[0], -1))
        tensors[name] = {"file": fname, "shape": list(p.value.shape)}
    manifest = {
        "version": CHECKPOINT_VERSION,
        "catalog": model.catalog.sizes,
        "input_dims": model.in_dims,
        "hyperparams": dataclasses.asdict(model.hp),
        "toggles": dataclasses.asdict(model.toggles),
        "exclude_target": model.exclude_target,
        "tensors": tensors,
    }
    if extra:
        manifest["extra"] = extra
    with open(directory / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return directory


def load_checkpoint(directory, catalog: Catalog, features: FeatureStore, index: HistoryIndex | None = None):
    directory = Path(directory)
    with open(directory / "manifest.json", encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise DataError(f"{directory}: unsupported checkpoint version {manifest.get('version')}")
    if manifest["catalog"] != catalog.sizes:
        raise DataError(f"checkpoint catalog sizes {manifest['catalog']} do not match data {catalog.sizes}")
    hp = Hyperparams(**manifest["hyperparams"])
    toggles = BranchToggles(**manifest["toggles"])
    model = CRBPR(catalog, features, index, hp, toggles, manifest.get("exclude_target", True))
    for name, spec in manifest["tensors"].items():
        if name not in model.params:
            raise DataError(f"checkpoint tensor {name!r} is not a model parameter")
        value = read_tensor_bin(directory / spec["file"]).reshape(spec["shape"])
        if value.shape != model.params[name].shape:
            raise DataError(f"tensor {name!r} has shape {value.shape}, expected {model.params[name].shape}")
        model.params[name].value = value.astype(np.float32)
    missing = set(model.params) - set(manifest["tensors"])
    if missing:
        raise DataError(f"checkpoint lacks tensors {sorted(missing)}")
    model.mark_updated()
    return model
