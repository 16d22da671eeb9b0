"""Distribution network: prototypes, task graph assembly, learned adjacency,
densely connected graph convolution, and the query classifier."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from . import tensor as T
from .config import GraphConfig, ModelConfig
from .embedding import NodeVector, attach_label, embed, init_embedding, norm
from .params import ParameterStore, add_linear, add_norm
from .seeding import INIT, derive_rng
from .tensor import Tensor


def init_graph(store: ParameterStore, config: GraphConfig, embed_dim: int, rng: np.random.Generator,
               prefix: str = "graph"):
    config.validate()
    d = config.input_dim(embed_dim)
    for r in range(config.iterations):
        _init_adjacency(store, f"{prefix}.adj{r}", d, config.adjacency_widths, rng)
        add_linear(store, f"{prefix}.gcn{r}", rng, d, config.hidden_width)
        if config.node_norm:
            add_norm(store, f"{prefix}.gcn{r}.bn", config.hidden_width)
        d = d + config.hidden_width if config.dense else config.hidden_width
    if config.head == "row":
        _init_adjacency(store, f"{prefix}.adj{config.iterations}", d, config.adjacency_widths, rng)
        head_in = config.node_count()
    else:
        head_in = d
    add_linear(store, f"{prefix}.head", rng, head_in, config.n_way)


def _init_adjacency(store, name, d, widths, rng):
    cin = d
    for i, w in enumerate(widths):
        add_linear(store, f"{name}.conv{i}", rng, cin, w)
        if i < len(widths) - 1:
            add_norm(store, f"{name}.bn{i}", w)
        cin = w


def init_model(config: ModelConfig, seed: Optional[int] = None) -> ParameterStore:
    """Fresh parameters for the whole network, fully determined by ``seed``."""
    config.validate()
    rng = derive_rng(config.seed if seed is None else seed, INIT)
    store = ParameterStore()
    init_embedding(store, config.embedding, rng)
    init_graph(store, config.graph, config.embedding.out_dim, rng)
    return store


# ------------------------------------------------------------------ node sets


def stack_nodes(nodes: Sequence[NodeVector]) -> Tensor:
    lengths = {n.features.shape[-1] for n in nodes}
    if len(lengths) != 1:
        raise ValueError(f"mixed node lengths {sorted(lengths)}")
    return T.stack([n.features for n in nodes], axis=0)


def compute_prototypes(support: Sequence[NodeVector], n_way: int) -> List[NodeVector]:
    """Class-mean node per class, in class order."""
    protos = []
    for c in range(n_way):
        members = [n.features for n in support if n.class_id == c]
        if not members:
            raise ValueError(f"class {c} has no support nodes")
        if len(members) == 1:
            feats = members[0]
        else:
            feats = T.mean(T.stack(members, axis=0), axis=0)
        protos.append(NodeVector(feats, role="prototype", class_id=c))
    return protos


def assemble_nodes(support: Sequence[NodeVector], prototypes: Sequence[NodeVector], query: NodeVector,
                   mode: str) -> List[NodeVector]:
    """Ordered node list for each prototype mode; the query is always last."""
    if mode == "none":
        nodes = list(support) + [query]
    elif mode == "nodes":
        nodes = list(support) + list(prototypes) + [query]
    elif mode == "only":
        nodes = list(prototypes) + [query]
    elif mode == "info":
        by_class = {p.class_id: p for p in prototypes}
        nodes = [
            NodeVector(T.concat([s.features, by_class[s.class_id].features]), "support", s.class_id, s.angle_id)
            for s in support
        ]
        nodes.append(NodeVector(T.concat([query.features, query.features]), "query", query.class_id, query.angle_id))
    else:
        raise ValueError(f"unknown prototype mode {mode!r}")
    stack_nodes(nodes)  # length check
    return nodes


# ------------------------------------------------------------------- adjacency


def pairwise_difference(x: Tensor, kind: str = "abs") -> Tensor:
    """``(n, d)`` -> ``(n, n, d)`` tensor of |x_i - x_j| or (x_i - x_j)^2."""
    n, d = x.shape
    diff = T.sub(T.reshape(x, (n, 1, d)), T.reshape(x, (1, n, d)))
    if kind == "abs":
        return T.tabs(diff)
    if kind == "squared":
        return T.square(diff)
    raise ValueError(f"unknown distance kind {kind!r}")


def adjacency(x: Tensor, store: ParameterStore, name: str, config: GraphConfig, training: bool = False,
              batch_eval: bool = False) -> Tensor:
    """Learned edge weights in (0, 1): a stack of 1x1 convolutions over pair differences."""
    d = x.shape[-1]
    w0 = store[f"{name}.conv0.w"]
    if w0.shape[0] != d:
        raise ValueError(f"adjacency {name}: node length {d} but scorer expects {w0.shape[0]}")
    h = pairwise_difference(x, config.distance_kind)
    last = len(config.adjacency_widths) - 1
    for i in range(len(config.adjacency_widths)):
        h = T.linear(h, store[f"{name}.conv{i}.w"], store[f"{name}.conv{i}.b"])
        if i < last:
            h = T.relu(norm(h, store, f"{name}.bn{i}", training, (0, 1), batch_eval))
    n = x.shape[0]
    return T.sigmoid(T.reshape(h, (n, n)))


def propagation_matrix(a: Tensor, normalize: bool = True) -> Tensor:
    """Row-normalized ``A + I``, or ``A`` itself when ``normalize`` is off."""
    if not normalize:
        return a
    a_hat = T.add(a, np.eye(a.shape[0]))
    return T.div(a_hat, T.tsum(a_hat, axis=1, keepdims=True))


def gcn_layer(x: Tensor, a: Tensor, store: ParameterStore, name: str, config: GraphConfig,
              training: bool = False, batch_eval: bool = False) -> Tensor:
    """Potential features relu(norm(linear(Â X)))."""
    n = x.shape[0]
    if a.shape != (n, n):
        raise ValueError(f"gcn_layer: adjacency {a.shape} vs {n} nodes")
    h = T.matmul(propagation_matrix(a, config.normalize_adjacency), x)
    h = T.linear(h, store[f"{name}.w"], store[f"{name}.b"])
    if config.node_norm:
        h = norm(h, store, f"{name}.bn", training, (0,), batch_eval)
    return T.relu(h)


def dense_update(x: Tensor, x_star: Tensor, dense: bool) -> Tensor:
    if x.shape[0] != x_star.shape[0]:
        raise ValueError(f"dense_update: {x.shape[0]} vs {x_star.shape[0]} rows")
    return T.concat([x, x_star], axis=-1) if dense else x_star


def classify_query(x: Tensor, store: ParameterStore, config: GraphConfig, training: bool = False,
                   batch_eval: bool = False, prefix: str = "graph"):
    """Query logits; also returns the final adjacency for the row head (else None)."""
    w = store[f"{prefix}.head.w"]
    final_adj = None
    if config.head == "row":
        final_adj = adjacency(x, store, f"{prefix}.adj{config.iterations}", config, training, batch_eval)
        feats = final_adj[-1]
    else:
        feats = x[-1]
    if feats.shape[-1] != w.shape[0]:
        raise ValueError(f"classify_query: head expects {w.shape[0]} inputs, got {feats.shape[-1]}")
    return T.linear(feats, w, store[f"{prefix}.head.b"]), final_adj


# ---------------------------------------------------------------- full forward


@dataclass
class EpisodeOutput:
    posterior: np.ndarray
    loss: Tensor
    logits: Tensor
    nodes: List[NodeVector] = field(default_factory=list)
    embeddings: Optional[Tensor] = None
    features: List[Tensor] = field(default_factory=list)
    adjacencies: List[Tensor] = field(default_factory=list)

    @property
    def prediction(self) -> int:
        return int(np.argmax(self.posterior))


def forward_episode(episode, store: ParameterStore, config: ModelConfig, training: bool = False) -> EpisodeOutput:
    """Embed, build the task graph, iterate, classify, and score the query.

    ``episode`` needs ``support_images`` (class-major, N*K), ``support_labels``,
    ``query_image`` and ``query_label``; angle ids are optional metadata.
    """
    g = config.graph
    nk = len(episode.support_labels)
    if nk != g.n_way * g.k_shot:
        raise ValueError(f"episode has {nk} support samples, config expects {g.n_way}x{g.k_shot}")
    inst = config.norm_eval == "batch"
    images = np.concatenate([np.asarray(episode.support_images), np.asarray(episode.query_image)[None]])
    emb = embed(images[..., None], config.embedding, store, training, batch_eval=inst)
    s_angles = getattr(episode, "support_angles", None)
    support = [
        attach_label(emb[i], int(episode.support_labels[i]), g.n_way, "support",
                     None if s_angles is None else int(s_angles[i]))
        for i in range(nk)
    ]
    query = attach_label(emb[nk], None, g.n_way, "query", getattr(episode, "query_angle", None))
    protos = compute_prototypes(support, g.n_way) if g.proto_mode != "none" else []
    nodes = assemble_nodes(support, protos, query, g.proto_mode)
    x = stack_nodes(nodes)
    features, adjs = [x], []
    for r in range(g.iterations):
        a = adjacency(x, store, f"graph.adj{r}", g, training, inst)
        x_star = gcn_layer(x, a, store, f"graph.gcn{r}", g, training, inst)
        x = dense_update(x, x_star, g.dense)
        features.append(x)
        adjs.append(a)
    logits, final_adj = classify_query(x, store, g, training, inst)
    if final_adj is not None:
        adjs.append(final_adj)
    loss = T.softmax_cross_entropy(logits, int(episode.query_label))
    return EpisodeOutput(
        posterior=T.softmax_np(logits.data),
        loss=loss,
        logits=logits,
        nodes=nodes,
        embeddings=emb,
        features=features,
        adjacencies=adjs,
    )
