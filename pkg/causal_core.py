"""Causal graphs, linear-Gaussian structural causal models and the checks run on them.

Covers parent/descendant queries, the self-cycle criterion for unique solvability of a
single variable, policy-graph construction, ancestral sampling and Fisher-z
conditional-independence testing.
"""

import csv
import itertools
import json
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Optional, Sequence, Set, Tuple

import networkx as nx
import numpy as np
from scipy import stats

from errors import DataError

log = logging.getLogger("causal_act.causal_core")

DEFAULT_ALPHA = 0.01
ACTION_NODE = "A"
EXOGENOUS_NODE = "U"
INDEPENDENT = "independent"
DEPENDENT = "dependent"


class CausalGraph:
    """Named-node directed graph. Self-edges and cycles are allowed."""

    def __init__(self, nodes: Iterable[str], edges: Iterable[Tuple[str, str]] = ()):
        self.nodes: List[str] = list(nodes)
        if len(set(self.nodes)) != len(self.nodes):
            raise DataError("Duplicate node identifiers in causal graph")
        declared = set(self.nodes)
        edge_set: Set[Tuple[str, str]] = set()
        for edge in edges:
            u, v = tuple(edge)
            if u not in declared or v not in declared:
                missing = u if u not in declared else v
                raise DataError(f"Edge ({u}, {v}) references undeclared node '{missing}'")
            edge_set.add((u, v))
        self.edges: Set[Tuple[str, str]] = edge_set

        self._graph = nx.DiGraph()
        self._graph.add_nodes_from(self.nodes)
        self._graph.add_edges_from(sorted(edge_set))

    @property
    def nx_graph(self) -> nx.DiGraph:
        return self._graph

    def require(self, node: str) -> None:
        if node not in self._graph:
            raise DataError(f"Unknown node '{node}'")

    def is_acyclic(self) -> bool:
        return nx.is_directed_acyclic_graph(self._graph)

    def with_edges(self, extra: Iterable[Tuple[str, str]]) -> "CausalGraph":
        return CausalGraph(self.nodes, set(self.edges) | set(extra))

    def to_json(self) -> str:
        return json.dumps(
            {"nodes": self.nodes, "edges": [list(e) for e in sorted(self.edges)]}
        )

    @classmethod
    def from_json(cls, text: str) -> "CausalGraph":
        try:
            data = json.loads(text)
            return cls(data["nodes"], [tuple(e) for e in data["edges"]])
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            if isinstance(e, DataError):
                raise
            raise DataError(f"Invalid causal graph JSON: {e}")

    def __repr__(self) -> str:
        return f"<CausalGraph(nodes={len(self.nodes)}, edges={len(self.edges)})>"


@dataclass(frozen=True)
class Mechanism:
    """Linear-Gaussian structural function: intercept + sum(coeff * parent) + noise."""

    intercept: float = 0.0
    coefficients: Dict[str, float] = field(default_factory=dict)
    noise_sd: float = 1.0


@dataclass
class Scm:
    """Structural causal model with mutually independent Gaussian noises."""

    graph: CausalGraph
    mechanisms: Dict[str, Mechanism]

    def __post_init__(self):
        nodes = set(self.graph.nodes)
        if set(self.mechanisms) != nodes:
            missing = sorted(nodes - set(self.mechanisms))
            extra = sorted(set(self.mechanisms) - nodes)
            raise DataError(
                f"Every node needs exactly one mechanism (missing {missing}, "
                f"unknown {extra})"
            )
        for node, mech in self.mechanisms.items():
            if mech.noise_sd < 0:
                raise DataError(f"Noise sd of '{node}' must be >= 0")
            stray = set(mech.coefficients) - parents(self.graph, node)
            if stray:
                raise DataError(
                    f"Mechanism of '{node}' uses non-parents {sorted(stray)}"
                )


@dataclass(frozen=True)
class CiReport:
    """Outcome of one Fisher-z conditional-independence test."""

    node_a: str
    node_b: str
    cond_set: Tuple[str, ...]
    stat: float
    n: int
    alpha: float
    verdict: str
    p_value: float = float("nan")

    CSV_FIELDS = ("node_a", "node_b", "cond_set", "stat", "n", "alpha", "verdict")

    @property
    def independent(self) -> bool:
        return self.verdict == INDEPENDENT

    def to_csv_row(self) -> Dict[str, Any]:
        return {
            "node_a": self.node_a,
            "node_b": self.node_b,
            "cond_set": ";".join(self.cond_set),
            "stat": f"{self.stat:.6f}",
            "n": self.n,
            "alpha": self.alpha,
            "verdict": self.verdict,
        }


## Graph queries
def parents(graph: CausalGraph, node: str) -> Set[str]:
    graph.require(node)
    return set(graph.nx_graph.predecessors(node))


def descendants(graph: CausalGraph, node: str) -> Set[str]:
    """Nodes reachable from `node` by a directed path of length >= 1.

    `node` itself is included only when a cycle leads back to it.
    """
    graph.require(node)
    reachable = set(nx.descendants(graph.nx_graph, node))
    # networkx never reports the source; re-add it when a path returns to it
    if any(p == node or p in reachable for p in graph.nx_graph.predecessors(node)):
        reachable.add(node)
    return reachable


def non_descendants(graph: CausalGraph, node: str) -> Set[str]:
    return set(graph.nodes) - descendants(graph, node) - {node}


def has_self_cycle(graph: CausalGraph, node: str) -> bool:
    """True iff the direct edge node -> node exists. Longer cycles do not count."""
    graph.require(node)
    return (node, node) in graph.edges


def is_uniquely_solvable_single(graph: CausalGraph, node: str) -> bool:
    """Unique solvability w.r.t. {node}: holds iff node has no self cycle."""
    return not has_self_cycle(graph, node)


def observation_node(i: int) -> str:
    """Name of the i-th (1-based) observation node."""
    return f"X{i}"


def build_policy_graph(
    n_obs: int,
    parent_mask: Sequence[int],
    intra_obs_edges: Iterable[Tuple[int, int]] = (),
) -> CausalGraph:
    """Causal graph of an imitation policy at one time step.

    Args:
        n_obs: Number of observation nodes X1..Xn
        parent_mask: Bit i set means X(i+1) -> A
        intra_obs_edges: 1-based (i, j) pairs adding Xi -> Xj

    Returns:
        CausalGraph: nodes X1..Xn, A, U with U -> Xi for every i
    """
    mask = [int(b) for b in parent_mask]
    if len(mask) != n_obs:
        raise DataError(f"parent_mask has length {len(mask)}, expected {n_obs}")
    if any(b not in (0, 1) for b in mask):
        raise DataError("parent_mask entries must be 0 or 1")

    obs = [observation_node(i) for i in range(1, n_obs + 1)]
    edges = {(obs[i], ACTION_NODE) for i, bit in enumerate(mask) if bit}
    edges |= {(EXOGENOUS_NODE, x) for x in obs}
    for i, j in intra_obs_edges:
        if not (1 <= i <= n_obs and 1 <= j <= n_obs):
            raise DataError(
                f"Intra-observation edge ({i}, {j}) out of range 1..{n_obs}"
            )
        edges.add((obs[i - 1], obs[j - 1]))
    return CausalGraph(obs + [ACTION_NODE, EXOGENOUS_NODE], edges)


def random_policy_graph(
    n_obs: int, rng: np.random.Generator, edge_prob: float = 0.3
) -> CausalGraph:
    """Random policy graph with random intra-observation edges (cycles included)."""
    mask = rng.integers(0, 2, size=n_obs)
    intra = [
        (i, j)
        for i in range(1, n_obs + 1)
        for j in range(1, n_obs + 1)
        if rng.random() < edge_prob
    ]
    return build_policy_graph(n_obs, mask, intra)


def policy_family_check(
    n_graphs: int = 1000, seed: int = 0, max_obs: int = 8
) -> Dict[str, int]:
    """Check unique solvability w.r.t. {A} over random policy graphs.

    Every constructed graph must pass; the same graph with an injected A -> A edge
    must fail.

    Returns:
        dict: counts of constructed graphs passing and of mutated graphs failing
    """
    rng = np.random.default_rng(seed)
    passed = mutated_failed = 0
    for _ in range(n_graphs):
        graph = random_policy_graph(int(rng.integers(1, max_obs + 1)), rng)
        if is_uniquely_solvable_single(graph, ACTION_NODE):
            passed += 1
        mutated = graph.with_edges([(ACTION_NODE, ACTION_NODE)])
        if not is_uniquely_solvable_single(mutated, ACTION_NODE):
            mutated_failed += 1
    log.info(
        f"Policy graph family check: {passed}/{n_graphs} solvable, "
        f"{mutated_failed}/{n_graphs} mutated graphs rejected"
    )
    return {"graphs": n_graphs, "passed": passed, "mutated_failed": mutated_failed}


## Sampling
def sample_scm(scm: Scm, n_samples: int, seed: int) -> np.ndarray:
    """Ancestral sampling; column order follows `scm.graph.nodes`."""
    if not scm.graph.is_acyclic():
        raise DataError("sampling requires acyclic graph")
    rng = np.random.default_rng(seed)
    nodes = scm.graph.nodes
    column = {node: i for i, node in enumerate(nodes)}
    # one noise column per node, drawn up front so the order of evaluation is irrelevant
    noise = rng.standard_normal((n_samples, len(nodes)))
    data = np.zeros((n_samples, len(nodes)))
    for node in nx.lexicographical_topological_sort(scm.graph.nx_graph):
        mech = scm.mechanisms[node]
        col = column[node]
        values = np.full(n_samples, float(mech.intercept))
        for parent, coeff in sorted(mech.coefficients.items()):
            values = values + coeff * data[:, column[parent]]
        data[:, col] = values + mech.noise_sd * noise[:, col]
    return data


def chain_scm(
    names: Sequence[str] = ("X1", "X2", "A"),
    coefficient: float = 1.0,
    noise_sd: float = 1.0,
) -> Scm:
    """Linear-Gaussian chain names[0] -> names[1] -> ... with equal coefficients."""
    edges = list(zip(names, names[1:]))
    graph = CausalGraph(names, edges)
    mechanisms = {names[0]: Mechanism(noise_sd=noise_sd)}
    for u, v in edges:
        mechanisms[v] = Mechanism(coefficients={u: coefficient}, noise_sd=noise_sd)
    return Scm(graph=graph, mechanisms=mechanisms)


## Conditional independence
def _residualize(y: np.ndarray, conditioning: np.ndarray) -> np.ndarray:
    design = np.column_stack([np.ones(len(y)), conditioning])
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    return y - design @ coef


def _is_degenerate(residual: np.ndarray, raw: np.ndarray) -> bool:
    return float(np.std(residual)) <= 1e-9 * (1.0 + float(np.std(raw)))


def partial_correlation(
    x: np.ndarray, y: np.ndarray, conditioning: Optional[np.ndarray] = None
) -> float:
    """Correlation of x and y after linearly regressing out the conditioning columns.

    A variable fully determined by the conditioning set yields 0.
    """
    n = len(x)
    z = np.zeros((n, 0)) if conditioning is None else conditioning.reshape(n, -1)
    rx, ry = _residualize(x, z), _residualize(y, z)
    if _is_degenerate(rx, x) or _is_degenerate(ry, y):
        return 0.0
    r = float(np.corrcoef(rx, ry)[0, 1])
    return float(np.clip(r, -1.0, 1.0))


def fisher_z_test(
    r: float, n: int, cond_size: int, alpha: float = DEFAULT_ALPHA
) -> Tuple[float, str]:
    """Two-sided Fisher-z test of zero partial correlation.

    Returns:
        (p_value, verdict)
    """
    dof = n - cond_size - 3
    if dof <= 0:
        raise DataError(
            f"Conditioning set of size {cond_size} is too large for {n} samples"
        )
    clipped = np.clip(r, -1.0 + 1e-15, 1.0 - 1e-15)
    z = np.sqrt(dof) * np.arctanh(clipped)
    p_value = float(2.0 * stats.norm.sf(abs(z)))
    return p_value, INDEPENDENT if p_value > alpha else DEPENDENT


def ci_test(
    data: np.ndarray,
    columns: Dict[str, int],
    node_a: str,
    node_b: str,
    cond_set: Sequence[str],
    alpha: float = DEFAULT_ALPHA,
) -> CiReport:
    cond = tuple(sorted(cond_set))
    n = data.shape[0]
    if n - len(cond) - 3 <= 0:
        raise DataError(
            f"Conditioning set of size {len(cond)} is too large for {n} samples"
        )
    z = data[:, [columns[c] for c in cond]] if cond else None
    r = partial_correlation(data[:, columns[node_a]], data[:, columns[node_b]], z)
    p_value, verdict = fisher_z_test(r, n, len(cond), alpha)
    return CiReport(node_a, node_b, cond, r, n, alpha, verdict, p_value)


def check_local_markov(
    data: np.ndarray, graph: CausalGraph, node: str, alpha: float = DEFAULT_ALPHA
) -> List[CiReport]:
    """One CI report per non-descendant w of `node`.

    Non-parents are tested against `node` given all parents (the local Markov
    statement, expected independent). Parents are tested given the remaining parents
    (expected dependent for a faithful model).
    """
    if not 0.0 < alpha < 1.0:
        raise DataError(f"alpha must lie in (0, 1), got {alpha}")
    data = np.asarray(data, dtype=float)
    if data.ndim != 2 or data.shape[1] != len(graph.nodes):
        raise DataError(
            f"Data has shape {data.shape}, expected {len(graph.nodes)} columns"
        )
    columns = {name: i for i, name in enumerate(graph.nodes)}
    pa = parents(graph, node) - {node}
    reports = []
    for other in sorted(non_descendants(graph, node)):
        cond = pa - {other}
        reports.append(ci_test(data, columns, node, other, sorted(cond), alpha))
    return reports


def local_markov_fixture(
    scm: Optional[Scm] = None,
    trials: int = 100,
    n_samples: int = 10_000,
    seed: int = 0,
    alpha: float = DEFAULT_ALPHA,
) -> Dict[str, Any]:
    """Repeat check_local_markov on every node of a linear-Gaussian SCM.

    A trial passes when every non-parent non-descendant is judged independent and
    every parent dependent.

    Returns:
        dict: trial count, passing trials and the reports of the last trial
    """
    scm = scm or chain_scm()
    passed = 0
    reports: List[CiReport] = []
    for trial in range(trials):
        data = sample_scm(scm, n_samples, seed + trial)
        reports = []
        ok = True
        for node in scm.graph.nodes:
            pa = parents(scm.graph, node)
            for report in check_local_markov(data, scm.graph, node, alpha):
                reports.append(report)
                if report.independent == (report.node_b in pa):
                    ok = False
        passed += ok
    log.info(f"Local Markov fixture: {passed}/{trials} trials passed")
    return {"trials": trials, "passed": passed, "reports": reports}


@dataclass
class DisentanglementResult:
    reports: List[CiReport]
    dependent_fraction: float
    skipped_dims: List[int]


def check_disentanglement(dataset, alpha: float = DEFAULT_ALPHA) -> DisentanglementResult:
    """Pairwise CI tests of observation dims given the previous action.

    Samples are (obs_t, action_{t-1}) for t >= 1 across all episodes. Dimensions fully
    determined by the previous action (or constant) cannot be tested and are skipped.
    """
    if not dataset.episodes:
        raise DataError("Disentanglement needs at least one episode")
    obs_rows, act_rows = [], []
    for episode in dataset.episodes:
        if len(episode.obs) < 2:
            raise DataError("Disentanglement needs at least 2 timesteps per episode")
        obs_rows.append(np.asarray(episode.obs)[1:])
        act_rows.append(np.asarray(episode.actions)[:-1])
    obs = np.vstack(obs_rows)
    prev_actions = np.vstack(act_rows)
    n = obs.shape[0]
    if n < 3:
        raise DataError(f"Disentanglement needs at least 3 samples, got {n}")

    residuals, skipped = {}, []
    design = prev_actions
    for d in range(obs.shape[1]):
        res = _residualize(obs[:, d], design)
        if _is_degenerate(res, obs[:, d]):
            skipped.append(d)
        else:
            residuals[d] = res

    cond = tuple(f"a{i}" for i in range(prev_actions.shape[1]))
    reports = []
    for i, j in itertools.combinations(sorted(residuals), 2):
        r = float(np.clip(np.corrcoef(residuals[i], residuals[j])[0, 1], -1.0, 1.0))
        p_value, verdict = fisher_z_test(r, n, len(cond), alpha)
        reports.append(
            CiReport(f"o{i}", f"o{j}", cond, r, n, alpha, verdict, p_value)
        )
    dependent = sum(1 for rep in reports if not rep.independent)
    fraction = dependent / len(reports) if reports else 0.0
    log.info(
        f"Disentanglement scan: {dependent}/{len(reports)} pairs dependent "
        f"({fraction:.3f}), {len(skipped)} degenerate dims skipped"
    )
    return DisentanglementResult(reports, fraction, skipped)


def write_ci_reports(reports: Iterable[CiReport], path: str) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=CiReport.CSV_FIELDS)
        writer.writeheader()
        for report in reports:
            writer.writerow(report.to_csv_row())
