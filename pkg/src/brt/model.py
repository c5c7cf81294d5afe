"""Point/patch transformer with bridged object queries: masked attention over point/patch/query tokens.

Token order inside a stage is ``[p_pnt | p_pat | o_pnt | o_pat]``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as tn
from .geometry import in_image, project_points
from .tensor import ONES, ZEROS, ParamRegistry, Tensor, normal
from .tokenizer import SENTINEL, TokenizedScene, tokenize_scene

MASK_MODES = ("bridged", "global", "separate")
FOURIER_SEED = 20_231


class ModelConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    n_pnt: int = 64
    k: int = 8
    d: int = 32
    l: int = 2  # noqa: E741
    h: int = 2
    s: int = 16
    f: int = 16
    num_classes: int = 10
    image_hw: tuple[int, int] = (64, 64)
    max_views: int = 3
    aggregation_stages: tuple[int, ...] | None = None  # 1-based; None means every stage
    conditional_queries: bool = True
    shared_pe: bool = True
    mask_mode: str = "bridged"
    density_radii: tuple[float, ...] = (0.25, 0.5, 1.0)
    use_occlusion: bool = True
    occlusion_tol: float = 0.05
    init_std: float = 0.02
    mlp_ratio: int = 2
    fourier_features: int = 0  # random Fourier features of 3D coordinates (0: raw coordinates only)
    fourier_scale: float = 0.5  # frequency std, cycles per meter

    def __post_init__(self):
        self.image_hw = tuple(int(x) for x in self.image_hw)
        self.density_radii = tuple(float(r) for r in self.density_radii)
        if not self.density_radii or min(self.density_radii) <= 0:
            raise ModelConfigError("density_radii must be non-empty and positive")
        if self.aggregation_stages is not None:
            self.aggregation_stages = tuple(sorted(int(x) for x in self.aggregation_stages))
        if self.d % self.h:
            raise ModelConfigError(f"hidden size {self.d} is not divisible by {self.h} heads")
        if self.fourier_features < 0 or not self.fourier_scale > 0:
            raise ModelConfigError("fourier_features must be >= 0 and fourier_scale > 0")
        if self.k > self.n_pnt:
            raise ModelConfigError("K must not exceed N_pnt")
        if self.l < 1:
            raise ModelConfigError("need at least one stage")
        if self.mask_mode not in MASK_MODES:
            raise ModelConfigError(f"mask_mode must be one of {MASK_MODES}")
        if self.grid_rows == 0 or self.image_hw[1] // self.s == 0:
            raise ModelConfigError("image smaller than one patch")
        bad = [s for s in (self.aggregation_stages or ()) if not 1 <= s <= self.l]
        if bad:
            raise ModelConfigError(f"aggregation stages {bad} outside 1..{self.l}")

    @property
    def grid_rows(self) -> int:
        return self.image_hw[0] // self.s

    @property
    def grid_cols_max(self) -> int:
        return (self.max_views * self.image_hw[1]) // self.s

    @property
    def n_pat(self) -> int:
        """Patch count of the widest (all views) stitched image."""
        return self.grid_rows * self.grid_cols_max

    @property
    def seed_input_dim(self) -> int:
        return 3 + 4 * len(self.density_radii)

    @property
    def coord_dim(self) -> int:
        """Width of the 3D coordinate encoding fed to the point and query embeddings."""
        return 3 + 2 * self.fourier_features

    def aggregates_at(self, stage: int) -> bool:
        return self.aggregation_stages is None or stage in self.aggregation_stages

    def to_json(self) -> dict:
        d = asdict(self)
        d["image_hw"] = list(self.image_hw)
        d["density_radii"] = list(self.density_radii)
        if self.aggregation_stages is not None:
            d["aggregation_stages"] = list(self.aggregation_stages)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ModelConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def build_mask(n_pnt: int, n_pat: int, k: int, mode: str = "bridged") -> np.ndarray:
    """Boolean (T, T) attention mask, True where row token may attend column token."""
    T = n_pnt + n_pat + 2 * k
    pnt = slice(0, n_pnt)
    pat = slice(n_pnt, n_pnt + n_pat)
    opnt = slice(n_pnt + n_pat, n_pnt + n_pat + k)
    opat = slice(n_pnt + n_pat + k, T)
    if mode == "global":
        return np.ones((T, T), dtype=bool)
    m = np.zeros((T, T), dtype=bool)
    m[pnt, pnt] = m[pnt, opnt] = True
    m[pat, pat] = m[pat, opat] = True
    if mode == "bridged":
        m[opnt, :] = True
        m[opat, :] = True
    elif mode == "separate":
        m[opnt, pnt] = m[opnt, opnt] = True
        m[opat, pat] = m[opat, opat] = True
    else:
        raise ModelConfigError(f"unknown mask mode {mode!r}")
    return m


def group_offsets(n_pnt: int, n_pat: int, k: int) -> dict[str, list[int]]:
    a, b, c = n_pnt, n_pnt + n_pat, n_pnt + n_pat + k
    return {"p_pnt": [0, a], "p_pat": [a, b], "o_pnt": [b, c], "o_pat": [c, c + k]}


def msa(x: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor, mask: np.ndarray, heads: int):
    """Masked multi-head attention. Returns (output (T, D), weights (H, T, T) ndarray).

    Head ``h`` uses column block ``h`` of ``wq/wk/wv`` and row block ``h`` of
    ``wo``; logits are the plain dot products of projected query and key.
    """
    T, D = x.shape
    dh = D // heads

    def split(t: Tensor) -> Tensor:
        return tn.transpose(t.reshape(T, heads, dh), (1, 0, 2))

    q, k, v = split(x @ wq), split(x @ wk), split(x @ wv)
    logits = tn.matmul(q, tn.transpose(k, (0, 2, 1)))
    att = tn.softmax_lastdim(logits, mask[None])
    out = tn.transpose(tn.matmul(att, v), (1, 0, 2)).reshape(T, D)
    return out @ wo, att.data


@dataclass
class TokenBundle:
    p_pnt: Tensor
    p_pat: Tensor
    o_pnt: Tensor
    o_pat: Tensor
    stage: int = 1

    def sizes(self) -> tuple[int, int, int]:
        return self.p_pnt.shape[0], self.p_pat.shape[0], self.o_pnt.shape[0]


@dataclass
class BridgeState:
    proposal_coords: np.ndarray  # k_pnt (K, 3)
    refined_coords: Tensor  # k'_pnt (K, 3)
    projected_2d: Tensor | None  # proj(k'_pnt), normalized (K, 2)
    projection_source: np.ndarray | None  # query whose projection each query uses (-1: none)
    pe_pnt: Tensor
    pe_pat: Tensor
    reference: Tensor | np.ndarray  # 3D anchor for the center offsets


@dataclass
class Predictions:
    head3d: Tensor  # (K, 3 + 3 + C + 1)
    head2d: Tensor  # (K, 4 + C + 1)
    center3d: Tensor
    size3d: Tensor
    logits3d: Tensor
    box2d: Tensor  # (cx, cy, w, h) normalized by the stitched image size
    logits2d: Tensor
    bridge: BridgeState
    tokens: TokenBundle
    attention: list[np.ndarray] = field(default_factory=list)  # per stage, (H, T, T)
    mask: np.ndarray | None = None


class BrTModel:
    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.seed = int(seed)
        self.registry = ParamRegistry(seed)
        self._build()

    # -- parameters --------------------------------------------------------
    def _mlp(self, prefix: str, dims: list[int], acts: list[str], zero_last: bool = False, std: float | None = None):
        layers = []
        for i, (din, dout) in enumerate(zip(dims[:-1], dims[1:])):
            last = i == len(dims) - 2
            if last and zero_last:
                init = ZEROS
            elif std is not None:
                init = normal(0.0, std)
            else:
                init = normal(0.0, math.sqrt(2.0 / din))
            w = self.registry.add(f"{prefix}.{i}.w", (din, dout), init)
            b = self.registry.add(f"{prefix}.{i}.b", (dout,), ZEROS)
            layers.append((w, b, acts[i]))
        return layers

    def _build(self):
        c = self.config
        D, F, C = c.d, c.f, c.num_classes
        std = c.init_std
        self.seed_mlp = self._mlp("seed", [c.seed_input_dim, F, F], ["relu", "none"])
        self.point_embed = self._mlp("point_embed", [c.coord_dim + F, D, D], ["relu", "none"])
        self.patch_embed = self._mlp("patch_embed", [c.s * c.s * 3, D, D], ["gelu", "none"])
        self.patch_pos = self.registry.add("patch_pos", (c.grid_rows, c.grid_cols_max, D), normal(0.0, std))
        self.pe_pnt = self.registry.add("pe", (c.k, D), normal(0.0, 1.0))
        self.pe_pat = self.pe_pnt if c.shared_pe else self.registry.add("pe_pat", (c.k, D), normal(0.0, 1.0))
        if c.conditional_queries:
            self.bias_mlp = self._mlp("bridge.offset", [F, D, 3], ["relu", "none"], zero_last=True)
            self.query3d_mlp = self._mlp("bridge.query3d", [c.coord_dim, D, D], ["relu", "none"], zero_last=True)
            self.query2d_mlp = self._mlp("bridge.query2d", [2, D, D], ["relu", "none"], zero_last=True)
        self.fourier_b = None
        if c.fourier_features:
            # fixed, not learned: a function of the config alone
            self.fourier_b = np.random.default_rng(FOURIER_SEED).normal(0.0, c.fourier_scale, (3, c.fourier_features))
        self.stages = []
        for l in range(1, c.l + 1):  # noqa: E741
            p = f"stage{l}"
            st = {
                "ln1": (self.registry.add(f"{p}.ln1.gamma", (D,), ONES), self.registry.add(f"{p}.ln1.beta", (D,), ZEROS)),
                "wq": self.registry.add(f"{p}.attn.wq", (D, D), normal(0.0, std)),
                "wk": self.registry.add(f"{p}.attn.wk", (D, D), normal(0.0, std)),
                "wv": self.registry.add(f"{p}.attn.wv", (D, D), normal(0.0, std)),
                "wo": self.registry.add(f"{p}.attn.wo", (D, D), normal(0.0, std)),
                "ln2": (self.registry.add(f"{p}.ln2.gamma", (D,), ONES), self.registry.add(f"{p}.ln2.beta", (D,), ZEROS)),
                "mlp": self._mlp(f"{p}.mlp", [D, c.mlp_ratio * D, D], ["gelu", "none"], std=std),
            }
            if c.aggregates_at(l):
                st["agg"] = self._mlp(f"{p}.agg", [D, D, D], ["relu", "none"], zero_last=True)
            self.stages.append(st)
        self.final_ln = (self.registry.add("final_ln.gamma", (D,), ONES), self.registry.add("final_ln.beta", (D,), ZEROS))
        self.head3d = self._mlp("head3d", [D, D, 6 + C + 1], ["relu", "none"])
        self.head2d = self._mlp("head2d", [D, D, 4 + C + 1], ["relu", "none"])

    # -- inputs ------------------------------------------------------------
    def tokenize(self, scene) -> TokenizedScene:
        c = self.config
        return tokenize_scene(scene, c.n_pnt, c.k, c.s, c.density_radii, c.use_occlusion, c.occlusion_tol)

    def encode_coords(self, x: Tensor) -> Tensor:
        """``[x, sin(2 pi x B), cos(2 pi x B)]`` with a fixed Gaussian frequency matrix ``B``.

        Points and queries share ``B``, so a dot product of two encodings is a
        smooth function of the distance between the coordinates.
        """
        if self.fourier_b is None:
            return x
        phase = (x @ Tensor(self.fourier_b)) * (2 * math.pi)
        return tn.concat([x, tn.sin(phase), tn.cos(phase)], axis=1)

    def patch_positions(self, rows: int, cols: int) -> Tensor:
        c = self.config
        if rows > c.grid_rows or cols > c.grid_cols_max:
            raise ModelConfigError(f"patch grid {rows}x{cols} exceeds configured {c.grid_rows}x{c.grid_cols_max}")
        return self.patch_pos[:rows, :cols].reshape(rows * cols, c.d)

    def embed_patches(self, tok: TokenizedScene) -> Tensor:
        grid = tok.grid
        content = tn.mlp_forward(Tensor(grid.patches), self.patch_embed)
        return content + self.patch_positions(grid.rows, grid.cols)

    def project_queries(self, refined: Tensor, tok: TokenizedScene):
        """Differentiable proj(k'), normalized by the stitched image size.

        Each proposal uses the in-front, in-image view with the smallest depth.
        A proposal without one borrows the projection of the nearest (3D)
        proposal that has one; if none has one, all map to the image center.
        """
        K = refined.shape[0]
        kp = refined.data
        best_depth = np.full(K, np.inf)
        best_view = np.full(K, -1)
        for vi, view in enumerate(tok.views):
            uv, depth = project_points(view, kp)
            ok = in_image(view, uv) & (depth > 0) & (depth < best_depth)
            best_depth[ok] = depth[ok]
            best_view[ok] = vi
        valid = best_view >= 0
        if not valid.any():
            return Tensor(np.full((K, 2), 0.5)), np.full(K, -1)
        source = np.arange(K)
        for i in np.nonzero(~valid)[0]:
            cand = np.nonzero(valid)[0]
            source[i] = cand[np.argmin(((kp[cand] - kp[i]) ** 2).sum(axis=1))]
        views = best_view[source]
        P = np.stack([tok.views[v].projection_matrix for v in views])  # (K, 3, 4)
        homo = tn.concat([refined[source], Tensor(np.ones((K, 1)))], axis=1).reshape(K, 4, 1)
        img = tn.matmul(Tensor(P), homo).reshape(K, 3)
        inv_z = tn.reciprocal(img[:, 2:3])
        uv = img[:, 0:2] * inv_z
        W, H = tok.layout.width_px, tok.layout.height_px
        offset = np.stack([views * W, np.zeros(K)], axis=1)
        scale = np.array([1.0 / tok.layout.total_width, 1.0 / H])
        return (uv + Tensor(offset)) * Tensor(scale), source

    def embed(self, tok: TokenizedScene) -> tuple[TokenBundle, BridgeState, Tensor]:
        c = self.config
        seed_in = Tensor(tok.seeds.inputs)
        feats = tn.mlp_forward(seed_in, self.seed_mlp)
        p_pnt = tn.mlp_forward(tn.concat([self.encode_coords(Tensor(tok.seeds.coords)), feats], axis=1), self.point_embed)
        p_pat = self.embed_patches(tok)
        k_pnt = tok.seeds.coords[tok.proposal_index]
        if c.conditional_queries:
            f_pnt = feats[tok.proposal_index]
            refined = Tensor(k_pnt) + tn.mlp_forward(f_pnt, self.bias_mlp)
            o_pnt = tn.mlp_forward(self.encode_coords(refined), self.query3d_mlp) + self.pe_pnt
            proj, source = self.project_queries(refined, tok)
            o_pat = tn.mlp_forward(proj, self.query2d_mlp) + self.pe_pat
            reference = refined
        else:
            refined = Tensor(k_pnt)
            proj, source = None, None
            o_pnt = self.pe_pnt + Tensor(np.zeros((c.k, c.d)))
            o_pat = self.pe_pat + Tensor(np.zeros((c.k, c.d)))
            reference = Tensor(np.zeros((c.k, 3)))
        bundle = TokenBundle(p_pnt, p_pat, o_pnt, o_pat, 1)
        bridge = BridgeState(k_pnt, refined, proj, source, self.pe_pnt, self.pe_pat, reference)
        return bundle, bridge, feats

    # -- stages ------------------------------------------------------------
    def aggregate(self, stage: int, p_pnt: Tensor, p_pat: Tensor, patch_index: np.ndarray) -> Tensor:
        """``p_pnt[n] += MLP(p_pat[patch_index[n]])`` for non-sentinel points."""
        st = self.stages[stage - 1]
        if "agg" not in st:
            return p_pnt
        valid = patch_index != SENTINEL
        if not valid.any():
            return p_pnt
        gathered = p_pat[np.where(valid, patch_index, 0)]
        delta = tn.mlp_forward(gathered, st["agg"])
        return p_pnt + delta * Tensor(valid[:, None].astype(np.float64))

    def stage_forward(self, bundle: TokenBundle, patch_index: np.ndarray, mask: np.ndarray):
        st = self.stages[bundle.stage - 1]
        p_pnt = self.aggregate(bundle.stage, bundle.p_pnt, bundle.p_pat, patch_index)
        n_pnt, n_pat, k = bundle.sizes()
        x = tn.concat([p_pnt, bundle.p_pat, bundle.o_pnt, bundle.o_pat], axis=0)
        y = tn.layernorm(x, *st["ln1"])
        att_out, weights = msa(y, st["wq"], st["wk"], st["wv"], st["wo"], mask, self.config.h)
        x = x + att_out
        x = x + tn.mlp_forward(tn.layernorm(x, *st["ln2"]), st["mlp"])
        a, b, c = n_pnt, n_pnt + n_pat, n_pnt + n_pat + k
        out = TokenBundle(x[:a], x[a:b], x[b:c], x[c:], bundle.stage + 1)
        return out, weights

    # -- heads -------------------------------------------------------------
    def forward(self, tok: TokenizedScene) -> Predictions:
        c = self.config
        bundle, bridge, _ = self.embed(tok)
        n_pnt, n_pat, k = bundle.sizes()
        mask = build_mask(n_pnt, n_pat, k, c.mask_mode)
        attention = []
        for _ in range(c.l):
            bundle, w = self.stage_forward(bundle, tok.point_patch.patch_index, mask)
            attention.append(w)
        o_pnt = tn.layernorm(bundle.o_pnt, *self.final_ln)
        o_pat = tn.layernorm(bundle.o_pat, *self.final_ln)
        h3 = tn.mlp_forward(o_pnt, self.head3d)
        h2 = tn.mlp_forward(o_pat, self.head2d)
        center = bridge.reference + h3[:, 0:3]
        size = tn.exp(h3[:, 3:6])
        box2d = tn.sigmoid(h2[:, 0:4])
        return Predictions(
            h3, h2, center, size, h3[:, 6:], box2d, h2[:, 4:], bridge, bundle, attention, mask
        )

    def predict(self, scene) -> Predictions:
        return self.forward(self.tokenize(scene))

    # -- persistence -------------------------------------------------------
    def save(self, path, extra: dict | None = None):
        meta = {"model_config": self.config.to_json(), "model_seed": self.seed}
        if extra:
            meta.update(extra)
        return tn.save_checkpoint(self.registry, path, meta)

    @classmethod
    def load(cls, path, config: ModelConfig | None = None) -> tuple["BrTModel", dict]:
        manifest, arrays = tn.read_checkpoint(path)
        if config is None:
            config = ModelConfig.from_json(manifest["model_config"])
        model = cls(config, manifest.get("model_seed", 0))
        model.registry.load_state(arrays)
        return model, manifest


def decays(name: str) -> bool:
    """Whether decoupled weight decay applies to a parameter."""
    if name.endswith((".b", ".gamma", ".beta")):
        return False
    return name not in ("pe", "pe_pat", "patch_pos")
