"""In-process multi-site simulation of the bias-corrected fitting protocol.

Actors: one site per source group, a target site holding the unlabeled target
covariates, and a coordinator that solves the weight problem. Actors exchange
only serialized JSON payloads through per-actor inboxes. Phases run in a
fixed order with a barrier after each:

    local_fits -> broadcast -> bias_terms -> transmit -> assembly -> weight_solve

Source rows never leave their site; the only row-level message is the target
covariate broadcast, sent only when density ratios are needed.
"""

from __future__ import annotations

import json
import queue
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import MixtureSpec, SourceGroup, TargetSample, check_common_dimension, make_random_split
from .density_ratio import ratio_from_dict, ratio_to_dict
from .errors import GroupDRLError, PrivacyViolation, ProtocolError, ValidationError
from .estimator import (
    DRLModel,
    FitConfig,
    assemble_gamma,
    fingerprint,
    fit_drl,
    fit_site_models,
    fit_site_ratios,
    site_bias_columns,
    solve_stage,
    substream_seed,
)
from .gamma import GammaMatrix
from .learners import predictor_from_dict, predictor_to_dict
from .weights import UncertaintySet, WeightSolution

PHASES = ("local_fits", "broadcast", "bias_terms", "transmit", "assembly", "weight_solve")
KINDS = ("predictor_bundle", "ratio_bundle", "bias_terms", "target_covariates", "gamma_request", "weight_result")
TARGET = "target"
COORDINATOR = "coordinator"
SCOPES = ("full", "half_a", "half_b")


def site_name(l: int) -> str:
    return f"site{l + 1}"


def _dumps(obj) -> bytes:
    return json.dumps(obj, separators=(",", ":")).encode()


@dataclass(frozen=True)
class SiteMessage:
    kind: str
    sender: str
    receiver: str
    payload: bytes
    phase: str
    bundle_id: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"unknown message kind {self.kind!r}")
        if self.phase not in PHASES:
            raise ValidationError(f"unknown phase {self.phase!r}")

    @property
    def byte_size(self) -> int:
        return len(self.payload)

    def metadata(self) -> dict:
        return {
            "kind": self.kind,
            "sender": self.sender,
            "receiver": self.receiver,
            "byte_size": self.byte_size,
            "phase": self.phase,
            "bundle_id": self.bundle_id,
        }


def decode_payload(msg: SiteMessage):
    """Parse a payload into the object its kind declares."""
    d = json.loads(msg.payload.decode())
    if msg.kind == "predictor_bundle":
        return predictor_from_dict(d["predictor"])
    if msg.kind == "ratio_bundle":
        return ratio_from_dict(d["ratio"])
    if msg.kind == "bias_terms":
        return {s: np.asarray(d[s], dtype=float) for s in ("half_a", "half_b")}
    if msg.kind == "target_covariates":
        return TargetSample(np.asarray(d["covariates"], dtype=float))
    if msg.kind == "gamma_request":
        return d
    return d


@dataclass
class TranscriptLog:
    messages: list = field(default_factory=list)
    phases: list = field(default_factory=list)

    def __iter__(self):
        return iter(self.messages)

    def __len__(self) -> int:
        return len(self.messages)

    def records(self) -> list[dict]:
        return [{"index": i, **m.metadata()} for i, m in enumerate(self.messages)]

    def phase_sequence(self) -> list[str]:
        """Completed phases in order, including ones that sent no message."""
        return list(self.phases)

    def count(self, kind: str, distinct: bool = True) -> int:
        msgs = [m for m in self.messages if m.kind == kind]
        return len({m.bundle_id for m in msgs}) if distinct else len(msgs)

    def to_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for rec in self.records():
                fh.write(json.dumps(rec) + "\n")


class _Bus:
    """Per-actor inboxes; deliveries are logged per phase and ordered at the barrier."""

    def __init__(self, actors: Sequence[str]):
        self.order = {a: i for i, a in enumerate(actors)}
        self.inbox = {a: queue.Queue() for a in actors}
        self.pending: list = []
        self.lock = threading.Lock()
        self.log = TranscriptLog()

    def send(self, kind, sender, receivers, payload: bytes, phase, bundle_id=""):
        for r in receivers:
            msg = SiteMessage(kind, sender, r, payload, phase, bundle_id)
            self.inbox[r].put(msg)
            with self.lock:
                self.pending.append(msg)

    def barrier(self, phase: str):
        with self.lock:
            self.log.phases.append(phase)
            self.pending.sort(key=lambda m: (self.order[m.sender], m.kind, m.bundle_id, self.order[m.receiver]))
            self.log.messages.extend(self.pending)
            self.pending = []

    def drain(self, actor) -> list[SiteMessage]:
        out = []
        q = self.inbox[actor]
        while True:
            try:
                out.append(q.get_nowait())
            except queue.Empty:
                break
        out.sort(key=lambda m: (self.order[m.sender], m.kind, m.bundle_id))
        return out


class SourceSite:
    def __init__(self, l: int, group: SourceGroup, config: FitConfig):
        self.l = l
        self.name = site_name(l)
        self.group = make_random_split(group, substream_seed(config.seed, l, 99)) if config.split_mode == "seeded" else group
        self.config = config
        self.models: dict = {}
        self.ratios: dict = {}
        self.columns: dict = {}

    def local_fits(self, bus: _Bus):
        target = None
        if self.config.shift_mode != "none":
            msgs = [m for m in bus.drain(self.name) if m.kind == "target_covariates"]
            if len(msgs) != 1:
                raise GroupDRLError("expected exactly one target covariate message")
            target = decode_payload(msgs[0])
        self.models = fit_site_models(self.group, self.l, self.config)
        self.ratios = fit_site_ratios(self.group, self.l, target, self.config)

    def broadcast(self, bus: _Bus, peers: Sequence[str]):
        for s in ("half_a", "half_b"):
            payload = _dumps({"site": self.l, "scope": s, "predictor": predictor_to_dict(self.models[s])})
            bus.send("predictor_bundle", self.name, peers, payload, "broadcast", f"pred:{self.l}:{s}")
        if self.config.shift_mode != "none":
            for s in ("half_a", "half_b"):
                payload = _dumps({"site": self.l, "scope": s, "ratio": ratio_to_dict(self.ratios[s])})
                bus.send("ratio_bundle", self.name, peers, payload, "broadcast", f"ratio:{self.l}:{s}")

    def bias_terms(self, bus: _Bus, L: int):
        half = {s: [None] * L for s in ("half_a", "half_b")}
        for s in half:
            half[s][self.l] = self.models[s]
        for m in bus.drain(self.name):
            if m.kind == "predictor_bundle":
                f = decode_payload(m)
                half[f.fit_scope][f.group_id] = f
        if any(f is None for s in half for f in half[s]):
            raise GroupDRLError("missing half-sample predictors after broadcast")
        self.columns = site_bias_columns(self.group, self.l, half, self.ratios, self.config.shift_mode)

    def transmit(self, bus: _Bus):
        for s in SCOPES:
            payload = _dumps({"site": self.l, "scope": s, "predictor": predictor_to_dict(self.models[s])})
            bus.send("predictor_bundle", self.name, [TARGET], payload, "transmit", f"pred:{self.l}:{s}")
        payload = _dumps({"site": self.l, **{s: self.columns[s].tolist() for s in ("half_a", "half_b")}})
        bus.send("bias_terms", self.name, [TARGET], payload, "transmit", f"bias:{self.l}")


class TargetSite:
    def __init__(self, target: TargetSample, config: FitConfig, L: int):
        self.target = target
        self.config = config
        self.L = L
        self.predictors = {s: [None] * L for s in SCOPES}
        self.gamma_raw: GammaMatrix | None = None

    def send_covariates(self, bus: _Bus, sites: Sequence[str]):
        payload = _dumps({"covariates": self.target.covariates.tolist()})
        bus.send("target_covariates", TARGET, sites, payload, "local_fits", "target_covariates")

    def assembly(self, bus: _Bus):
        cols = {s: [None] * self.L for s in ("half_a", "half_b")}
        for m in bus.drain(TARGET):
            if m.kind == "predictor_bundle":
                f = decode_payload(m)
                self.predictors[f.fit_scope][f.group_id] = f
            elif m.kind == "bias_terms":
                site = json.loads(m.payload.decode())["site"]
                c = decode_payload(m)
                for s in cols:
                    cols[s][site] = c[s]
        self.gamma_raw = assemble_gamma(
            self.predictors["half_a"], self.predictors["half_b"], cols["half_a"], cols["half_b"],
            self.target, self.config.shift_mode,
        )
        payload = _dumps({
            "gamma": self.gamma_raw.values.tolist(),
            "provenance": self.gamma_raw.provenance,
            "L": self.L,
        })
        bus.send("gamma_request", TARGET, [COORDINATOR], payload, "assembly", "gamma_request")


class Coordinator:
    def __init__(self, config: FitConfig):
        self.config = config

    def weight_solve(self, bus: _Bus):
        msgs = [m for m in bus.drain(COORDINATOR) if m.kind == "gamma_request"]
        req = decode_payload(msgs[0])
        raw = GammaMatrix(req["gamma"], req["provenance"])
        repaired, h_set, sol = solve_stage(raw, self.config, int(req["L"]))
        payload = _dumps({
            "solution": sol.to_dict(),
            "gamma": repaired.values.tolist(),
            "psd_repaired": repaired.psd_repaired,
            "h_set": h_set.to_dict(),
        })
        bus.send("weight_result", COORDINATOR, [TARGET], payload, "weight_solve", "weight_result")


def _run_phase(phase: str, tasks: list, threads: int):
    """Run (actor name, callable) pairs concurrently; any failure aborts the protocol."""

    def call(item):
        name, fn = item
        try:
            fn()
        except Exception as exc:  # noqa: BLE001 - re-raised with phase and site
            raise ProtocolError(phase, name, exc) from exc

    if threads > 1 and len(tasks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            for fut in [ex.submit(call, t) for t in tasks]:
                fut.result()
    else:
        for t in tasks:
            call(t)


def run_protocol(
    groups: Sequence[SourceGroup],
    target: TargetSample,
    config: FitConfig | None = None,
) -> tuple[DRLModel, TranscriptLog]:
    """Fit the bias-corrected aggregate through message passing between sites."""
    config = config or FitConfig()
    if len(groups) == 0:
        raise ValidationError("at least one source group is required")
    check_common_dimension(groups, target)
    L = len(groups)
    if L == 1:
        return fit_drl(groups, target, config), TranscriptLog()
    threads = max(1, int(config.threads or 1))
    sites = [SourceSite(l, g, config) for l, g in enumerate(groups)]
    names = [s.name for s in sites]
    bus = _Bus(names + [TARGET, COORDINATOR])
    tsite = TargetSite(target, config, L)
    coord = Coordinator(config)

    if config.shift_mode != "none":
        _run_phase("local_fits", [(TARGET, lambda: tsite.send_covariates(bus, names))], 1)
    _run_phase("local_fits", [(s.name, lambda s=s: s.local_fits(bus)) for s in sites], threads)
    bus.barrier("local_fits")
    _run_phase("broadcast", [(s.name, lambda s=s: s.broadcast(bus, [n for n in names if n != s.name]))
                             for s in sites], threads)
    bus.barrier("broadcast")
    _run_phase("bias_terms", [(s.name, lambda s=s: s.bias_terms(bus, L)) for s in sites], threads)
    bus.barrier("bias_terms")
    _run_phase("transmit", [(s.name, lambda s=s: s.transmit(bus)) for s in sites], threads)
    bus.barrier("transmit")
    _run_phase("assembly", [(TARGET, lambda: tsite.assembly(bus))], 1)
    bus.barrier("assembly")
    _run_phase("weight_solve", [(COORDINATOR, lambda: coord.weight_solve(bus))], 1)
    bus.barrier("weight_solve")

    result = json.loads(bus.drain(TARGET)[0].payload.decode())
    sol_d = result["solution"]
    sol = WeightSolution(
        MixtureSpec(sol_d["q"]), sol_d["objective"], sol_d["iterations"], sol_d["converged"],
        tuple(sol_d["active_set"]), sol_d["flat"], sol_d["kkt_residual"], sol_d["method"],
    )
    repaired = GammaMatrix(result["gamma"], tsite.gamma_raw.provenance, bool(result["psd_repaired"]))
    prepared = [s.group for s in sites]
    model = DRLModel(
        sol.q, tsite.predictors["full"], repaired, UncertaintySet.from_dict(result["h_set"]),
        fingerprint(config, prepared, target), "drl", sol, tsite.gamma_raw,
        diagnostics={"protocol": "federated"},
    )
    return model, bus.log


# ---------------------------------------------------------------------------
# privacy audit


@dataclass
class AuditReport:
    passed: bool
    violations: list
    edge_bytes: dict
    total_bytes: int

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "violations": self.violations,
            "edge_bytes": {f"{a}->{b}": v for (a, b), v in sorted(self.edge_bytes.items())},
            "total_bytes": self.total_bytes,
        }


def _numeric_lists(obj, out):
    if isinstance(obj, list):
        if obj and all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in obj):
            out.append(np.asarray(obj, dtype=float))
        else:
            for v in obj:
                _numeric_lists(v, out)
    elif isinstance(obj, dict):
        for v in obj.values():
            _numeric_lists(v, out)


class _Fingerprints:
    """Exact-match index of source rows and outcome vectors."""

    def __init__(self, groups: Sequence[SourceGroup]):
        self.rows: set = set()
        self.vectors: list = []
        self.p = groups[0].p if groups else 0
        self.binary: list = []
        for g in groups:
            X, y = np.asarray(g.covariates), np.asarray(g.outcomes)
            if self.p >= 2:
                self.rows.update(tuple(r) for r in X.tolist())
                self.binary.extend(np.ascontiguousarray(r).tobytes() for r in X)
            else:
                # single rows are scalars; look for whole covariate columns instead
                for idx in (slice(None), g.split_a, g.split_b):
                    self.vectors.append(X[idx, 0])
            for idx in (slice(None), g.split_a, g.split_b):
                self.vectors.append(y[idx])
            self.binary.append(np.ascontiguousarray(y).tobytes())
        self.vectors = [v for v in self.vectors if v.size >= 2]

    def scan_list(self, a: np.ndarray) -> str | None:
        p = self.p
        if p >= 2 and a.size >= p:
            for i in range(a.size - p + 1):
                if tuple(a[i : i + p].tolist()) in self.rows:
                    return f"source covariate row at offset {i}"
        for v in self.vectors:
            m = v.size
            if a.size < m:
                continue
            starts = np.flatnonzero(a[: a.size - m + 1] == v[0])
            for s in starts:
                if np.array_equal(a[s : s + m], v):
                    return f"source vector of length {m} at offset {int(s)}"
        return None

    def scan_bytes(self, raw: bytes) -> str | None:
        for b in self.binary:
            if b in raw:
                return "raw binary source data"
        return None


def audit_privacy(transcript: TranscriptLog, groups: Sequence[SourceGroup], raise_on_violation: bool = False) -> AuditReport:
    """Check that no payload carries source rows or outcome vectors; tally bytes per edge."""
    fp = _Fingerprints(groups)
    violations = []
    edges: dict = {}
    total = 0
    for i, m in enumerate(transcript):
        edges[(m.sender, m.receiver)] = edges.get((m.sender, m.receiver), 0) + m.byte_size
        total += m.byte_size
        if m.kind == "target_covariates" and m.sender == TARGET:
            continue
        try:
            obj = json.loads(m.payload.decode())
        except (UnicodeDecodeError, json.JSONDecodeError):
            obj = None
        detail = None
        if obj is None:
            detail = fp.scan_bytes(m.payload)
        else:
            lists: list = []
            _numeric_lists(obj, lists)
            for a in lists:
                detail = fp.scan_list(a)
                if detail:
                    break
        if detail:
            violations.append({"index": i, "kind": m.kind, "sender": m.sender, "receiver": m.receiver,
                               "detail": detail})
            if raise_on_violation:
                raise PrivacyViolation(i, m.kind, m.sender, detail)
    return AuditReport(not violations, violations, edges, total)
