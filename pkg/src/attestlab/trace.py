"""Synthetic SRAM trace generation, mutation, aggregation, and dataset assembly.

A firmware profile pins a data-section layout (typed variables at fixed
offsets) plus a stack usage pattern. A trace is one full SRAM snapshot at a
given time step: the data section is a deterministic function of
(firmware_seed, time_step), the stack mixes device power-up noise with
firmware-written frames. Feature extraction averages consecutive byte blocks
so the downstream detector sees values in [0, 1].
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .seeds import derive_seed, rng

VARIABLE_KINDS = ("constant", "counter", "random_walk", "flag")
MUTATION_KINDS = ("tamper_data", "tamper_function", "tamper_control_flow",
                  "data_injection")
LABELS = ("safe", "unsafe")

PROFILE_FORMAT_VERSION = 1


@dataclass(frozen=True)
class Variable:
    offset: int
    width: int
    kind: str
    init_seed: int


@dataclass(frozen=True)
class StackPattern:
    frame_sizes: tuple[int, ...]
    fill_fraction: float


@dataclass(frozen=True)
class Mutation:
    kind: str
    severity: float
    seed: int


@dataclass(frozen=True)
class LayoutSpec:
    """Knobs for random profile generation."""
    data_section_len: int = 512
    n_variables: int = 16
    frame_count: int = 6
    frame_size_min: int = 24
    frame_size_max: int = 64
    fill_fraction: float = 0.5
    # apportioned over VARIABLE_KINDS; constants dominate real data
    # sections, and keeping dynamic variables scarce keeps safe error
    # distributions tight enough for stable threshold transfer
    kind_weights: tuple[float, ...] = (0.60, 0.10, 0.10, 0.20)


@dataclass(frozen=True)
class FirmwareProfile:
    firmware_id: str
    firmware_seed: int
    data_section_len: int
    variables: tuple[Variable, ...]
    stack: StackPattern
    mutation: Mutation | None = None

    @property
    def stack_len(self) -> int:
        raw = sum(self.stack.frame_sizes)
        return raw + (-raw) % 4

    @property
    def total_len(self) -> int:
        return self.data_section_len + self.stack_len

    @property
    def label(self) -> str:
        return "unsafe" if self.mutation is not None else "safe"


@dataclass
class SramTrace:
    device_id: str
    firmware_id: str
    time_step: int
    label: str
    data: np.ndarray  # uint8, length = data_section_len + stack_len


@dataclass
class Dataset:
    train: np.ndarray
    train_noisy: np.ndarray
    val: np.ndarray
    test_safe: np.ndarray
    test_unsafe: np.ndarray
    meta: dict = field(default_factory=dict)


def _kind_widths(generator: np.random.Generator, kind: str) -> int:
    if kind == "constant":
        return int(generator.choice([4, 8, 12, 16]))
    if kind == "counter":
        return 2
    if kind == "random_walk":
        return 2
    return 2  # flag


def _kind_quota(weights, n: int) -> list[int]:
    """Largest-remainder apportionment of n variables over the kinds."""
    w = np.asarray(weights, dtype=np.float64)
    raw = w / w.sum() * n
    counts = np.floor(raw).astype(int)
    order = np.argsort(-(raw - counts), kind="stable")
    for i in order[:n - int(counts.sum())]:
        counts[i] += 1
    return [int(c) for c in counts]


def _place_variables(generator: np.random.Generator, kinds_widths: list,
                     data_section_len: int) -> list[Variable]:
    total = sum(w for _, w, _ in kinds_widths)
    free = data_section_len - total
    if free < 0:
        raise ValueError("variables (%d bytes) exceed data section (%d bytes)"
                         % (total, data_section_len))
    nslots = len(kinds_widths) + 1
    gaps = generator.multinomial(free, [1.0 / nslots] * nslots)
    variables = []
    offset = 0
    for (kind, width, init_seed), gap in zip(kinds_widths, gaps[:-1]):
        offset += int(gap)
        variables.append(Variable(offset=offset, width=width, kind=kind,
                                  init_seed=init_seed))
        offset += width
    return variables


def generate_profile(firmware_seed: int, spec: LayoutSpec = LayoutSpec(),
                     firmware_id: str | None = None) -> FirmwareProfile:
    """Deterministically derive a firmware profile from its seed."""
    if spec.data_section_len < 4 or spec.data_section_len % 4 != 0:
        raise ValueError("data_section_len must be a positive multiple of 4")
    if spec.n_variables < 1:
        raise ValueError("need at least one variable")
    if not 0.0 < spec.fill_fraction <= 0.6:
        raise ValueError("fill_fraction must be in (0, 0.6] to keep twin "
                         "stacks distinguishable")
    g = rng(firmware_seed, "profile")
    counts = _kind_quota(spec.kind_weights, spec.n_variables)
    kinds = [k for k, c in zip(VARIABLE_KINDS, counts) for _ in range(c)]
    g.shuffle(kinds)
    kinds_widths = []
    for kind in kinds:
        width = _kind_widths(g, kind)
        kinds_widths.append((kind, width, int(g.integers(2 ** 62))))
    variables = _place_variables(g, kinds_widths, spec.data_section_len)
    sizes = tuple(int(g.integers(spec.frame_size_min, spec.frame_size_max + 1))
                  for _ in range(spec.frame_count))
    stack = StackPattern(frame_sizes=sizes, fill_fraction=spec.fill_fraction)
    fid = firmware_id or "fw%016x" % (firmware_seed & (2 ** 64 - 1))
    return FirmwareProfile(firmware_id=fid, firmware_seed=firmware_seed,
                           data_section_len=spec.data_section_len,
                           variables=tuple(variables), stack=stack)


def _gaps(profile: FirmwareProfile) -> list[tuple[int, int]]:
    """Unused (offset, length) intervals of the data section."""
    out = []
    cursor = 0
    for v in sorted(profile.variables, key=lambda v: v.offset):
        if v.offset > cursor:
            out.append((cursor, v.offset - cursor))
        cursor = v.offset + v.width
    if cursor < profile.data_section_len:
        out.append((cursor, profile.data_section_len - cursor))
    return out


def mutate_profile(base: FirmwareProfile, kind: str, severity: float,
                   seed: int) -> FirmwareProfile:
    """Derive an unsafe profile by tampering with the base firmware."""
    if kind not in MUTATION_KINDS:
        raise ValueError("unknown mutation kind: %r" % kind)
    if not 0.0 < severity <= 1.0:
        raise ValueError("severity must be in (0, 1]")
    g = rng(base.firmware_seed, "mutate", kind, seed)
    mutation = Mutation(kind=kind, severity=severity, seed=seed)
    fid = "%s-%s-%g" % (base.firmware_id, kind, severity)

    if kind == "tamper_data":
        n = len(base.variables)
        k = math.ceil(severity * n)
        picked = set(int(i) for i in g.choice(n, size=k, replace=False))
        variables = []
        for i, v in enumerate(base.variables):
            if i in picked:
                new_seed = int(g.integers(2 ** 62))
                while new_seed == v.init_seed:
                    new_seed = int(g.integers(2 ** 62))
                v = replace(v, init_seed=new_seed)
            variables.append(v)
        return replace(base, firmware_id=fid, variables=tuple(variables),
                       mutation=mutation)

    if kind == "tamper_function":
        ops = max(1, math.ceil(severity * len(base.variables) / 2))
        kinds_widths = [(v.kind, v.width, v.init_seed) for v in base.variables]
        weights = np.asarray(LayoutSpec().kind_weights, dtype=float)
        weights = weights / weights.sum()
        for _ in range(ops):
            if len(kinds_widths) > 2 and g.random() < 0.5:
                del kinds_widths[int(g.integers(len(kinds_widths)))]
            else:
                vk = VARIABLE_KINDS[int(g.choice(len(VARIABLE_KINDS), p=weights))]
                entry = (vk, _kind_widths(g, vk), int(g.integers(2 ** 62)))
                kinds_widths.insert(int(g.integers(len(kinds_widths) + 1)), entry)
        variables = _place_variables(g, kinds_widths, base.data_section_len)
        return replace(base, firmware_id=fid, variables=tuple(variables),
                       mutation=mutation)

    if kind == "tamper_control_flow":
        sizes = []
        for z in base.stack.frame_sizes:
            scale = 1.0 + severity * (g.random() - 0.5)
            sizes.append(max(8, int(round(z * scale))))
        if severity >= 0.5:
            sizes.append(max(8, int(g.integers(16, 64))))
        fill = float(np.clip(base.stack.fill_fraction
                             + severity * 0.2 * (g.random() - 0.5), 0.1, 0.6))
        stack = StackPattern(frame_sizes=tuple(sizes), fill_fraction=fill)
        return replace(base, firmware_id=fid, stack=stack, mutation=mutation)

    # data_injection
    gaps = _gaps(base)
    total_gap = sum(n for _, n in gaps)
    if total_gap == 0:
        raise ValueError("data section has no unused gap to inject into")
    needed = math.ceil(severity * total_gap)
    order = list(g.permutation(len(gaps)))
    injected = []
    for gi in order:
        if needed <= 0:
            break
        off, length = gaps[gi]
        take = min(needed, length)
        start = off + int(g.integers(0, length - take + 1))
        injected.append(Variable(offset=start, width=take, kind="constant",
                                 init_seed=int(g.integers(2 ** 62))))
        needed -= take
    variables = tuple(sorted(base.variables + tuple(injected),
                             key=lambda v: v.offset))
    return replace(base, firmware_id=fid, variables=variables,
                   mutation=mutation)


def _variable_values(profile: FirmwareProfile, var: Variable,
                     time_steps: np.ndarray) -> np.ndarray:
    """(T, width) uint8 values of one variable at the requested steps."""
    g = rng(profile.firmware_seed, "var", var.init_seed)
    base = g.integers(0, 256, size=var.width, dtype=np.int64)
    t = time_steps[:, None]

    if var.kind == "constant":
        vals = np.broadcast_to(base, (len(time_steps), var.width))
    elif var.kind == "counter":
        vals = (base + t) % 256
    elif var.kind == "flag":
        period = int(g.integers(4, 33))
        phase = int(g.integers(period))
        on = ((time_steps + phase) % period) < period // 2
        vals = np.where(on[:, None], base ^ 0x01, base)
    elif var.kind == "random_walk":
        max_t = int(time_steps.max(initial=0))
        wg = rng(profile.firmware_seed, "walk", var.init_seed)
        steps = wg.choice(np.array([-1, 1], dtype=np.int64),
                          size=(max_t, var.width))
        path = np.empty((max_t + 1, var.width), dtype=np.int64)
        path[0] = base
        cur = base.copy()
        for i in range(max_t):
            cur = np.clip(cur + steps[i], 0, 255)
            path[i + 1] = cur
        vals = path[time_steps]
    else:
        raise ValueError("unknown variable kind: %r" % var.kind)
    return vals.astype(np.uint8)


def _data_sections(profile: FirmwareProfile,
                   time_steps: np.ndarray) -> np.ndarray:
    out = np.zeros((len(time_steps), profile.data_section_len), dtype=np.uint8)
    for var in profile.variables:
        out[:, var.offset:var.offset + var.width] = \
            _variable_values(profile, var, time_steps)
    return out


def _stacks(profile: FirmwareProfile, device_seed: int,
            time_steps: np.ndarray) -> np.ndarray:
    stack_len = profile.stack_len
    dev = rng(device_seed, profile.firmware_seed, "stack-init")
    init = dev.integers(0, 256, size=stack_len, dtype=np.uint8)
    out = np.broadcast_to(init, (len(time_steps), stack_len)).copy()
    t = time_steps[:, None]
    offset = 0
    for k, size in enumerate(profile.stack.frame_sizes):
        filled = math.ceil(profile.stack.fill_fraction * size)
        fg = rng(profile.firmware_seed, "frame", k)
        fbase = fg.integers(0, 256, size=filled, dtype=np.int64)
        out[:, offset:offset + filled] = ((fbase + t) % 256).astype(np.uint8)
        offset += size
    return out


def sample_traces(profile: FirmwareProfile, device_seed: int,
                  time_steps, device_id: str | None = None) -> list[SramTrace]:
    """Sample SRAM snapshots at the given time steps (vectorized)."""
    steps = np.asarray(list(time_steps), dtype=np.int64)
    if len(steps) == 0:
        return []
    if (steps < 0).any():
        raise ValueError("time steps must be non-negative")
    data = _data_sections(profile, steps)
    stacks = _stacks(profile, device_seed, steps)
    full = np.concatenate([data, stacks], axis=1)
    dev_id = device_id or "dev%016x" % (device_seed & (2 ** 64 - 1))
    label = profile.label
    return [SramTrace(device_id=dev_id, firmware_id=profile.firmware_id,
                      time_step=int(t), label=label, data=full[i])
            for i, t in enumerate(steps)]


def sample_trace(profile: FirmwareProfile, device_seed: int, time_step: int,
                 device_id: str | None = None) -> SramTrace:
    """Single snapshot; identical to the batched path at the same step."""
    return sample_traces(profile, device_seed, [time_step], device_id)[0]


def aggregate(values, s: int = 4, length: int | None = None) -> np.ndarray:
    """Average consecutive s-byte blocks into [0, 1] features.

    Block i covers bytes [i*s, (i+1)*s); feature = block sum / (255 * s).
    `length` selects the leading byte span to use (defaults to the full
    buffer) and must be a positive multiple of s.
    """
    if s < 1:
        raise ValueError("block width s must be >= 1")
    if isinstance(values, SramTrace):
        values = values.data
    buf = np.asarray(values)
    if buf.ndim != 1:
        raise ValueError("expected a 1-D byte buffer")
    n = len(buf) if length is None else int(length)
    if n < s or n % s != 0:
        raise ValueError("aggregation length %d is not a positive multiple "
                         "of s=%d" % (n, s))
    if n > len(buf):
        raise ValueError("aggregation length exceeds trace length")
    blocks = buf[:n].astype(np.float64).reshape(n // s, s)
    return blocks.sum(axis=1) / (255.0 * s)


def aggregate_many(traces, s: int = 4, length: int | None = None) -> np.ndarray:
    """Stack aggregate() of each trace into an (n, l) matrix."""
    if not traces:
        return np.zeros((0, 0))
    return np.stack([aggregate(t, s=s, length=length) for t in traces])


def inject_noise(x: np.ndarray, n_f: float, seed: int) -> np.ndarray:
    """Additive uniform noise: x + n_f * eps with eps ~ U[0, 1)."""
    if n_f < 0:
        raise ValueError("noise factor must be non-negative")
    x = np.asarray(x, dtype=np.float64)
    eps = np.random.default_rng(seed).random(x.shape)
    return x + n_f * eps


def build_dataset(safe_traces, unsafe_traces=(), *, s: int = 4,
                  length: int | None = None,
                  ratios: tuple[float, float, float] = (0.5, 0.25, 0.25),
                  n_f: float = 0.05, seed: int = 0) -> Dataset:
    """Aggregate, shuffle, and split safe traces; all unsafe go to test.

    Split sizes are floor(r * n) for train and val, remainder to test.
    """
    if len(ratios) != 3 or any(r <= 0 for r in ratios) \
            or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError("ratios must be three positive numbers summing to 1")
    if len(safe_traces) < 8:
        raise ValueError("need at least 8 safe traces to split")
    safe = aggregate_many(safe_traces, s=s, length=length)
    unsafe = aggregate_many(unsafe_traces, s=s, length=length) \
        if len(unsafe_traces) else np.zeros((0, safe.shape[1]))
    order = np.random.default_rng(derive_seed(seed, "split")).permutation(
        len(safe))
    safe = safe[order]
    n = len(safe)
    n_train = int(ratios[0] * n)
    n_val = int(ratios[1] * n)
    if n_train == 0 or n_val == 0 or n_train + n_val >= n:
        raise ValueError("split produced an empty partition")
    train = safe[:n_train]
    val = safe[n_train:n_train + n_val]
    test_safe = safe[n_train + n_val:]
    train_noisy = inject_noise(train, n_f, derive_seed(seed, "noise"))
    meta = {"s": s, "ratios": tuple(ratios), "n_f": n_f, "seed": seed,
            "n_safe": n, "n_unsafe": len(unsafe)}
    return Dataset(train=train, train_noisy=train_noisy, val=val,
                   test_safe=test_safe, test_unsafe=unsafe, meta=meta)


# ---------------------------------------------------------------------------
# serialization

def profile_to_dict(profile: FirmwareProfile) -> dict:
    d = {
        "format_version": PROFILE_FORMAT_VERSION,
        "firmware_id": profile.firmware_id,
        "firmware_seed": profile.firmware_seed,
        "data_section_len": profile.data_section_len,
        "variables": [
            {"offset": v.offset, "width": v.width, "kind": v.kind,
             "init_seed": v.init_seed} for v in profile.variables
        ],
        "stack": {"frame_sizes": list(profile.stack.frame_sizes),
                  "fill_fraction": profile.stack.fill_fraction},
        "mutation": None,
    }
    if profile.mutation is not None:
        d["mutation"] = {"kind": profile.mutation.kind,
                         "severity": profile.mutation.severity,
                         "seed": profile.mutation.seed}
    return d


def profile_from_dict(d: dict) -> FirmwareProfile:
    if d.get("format_version") != PROFILE_FORMAT_VERSION:
        raise ValueError("unsupported profile format version: %r"
                         % d.get("format_version"))
    mutation = None
    if d.get("mutation") is not None:
        m = d["mutation"]
        mutation = Mutation(kind=m["kind"], severity=m["severity"],
                            seed=m["seed"])
    return FirmwareProfile(
        firmware_id=d["firmware_id"], firmware_seed=d["firmware_seed"],
        data_section_len=d["data_section_len"],
        variables=tuple(Variable(**v) for v in d["variables"]),
        stack=StackPattern(frame_sizes=tuple(d["stack"]["frame_sizes"]),
                           fill_fraction=d["stack"]["fill_fraction"]),
        mutation=mutation)


def save_profile(path, profile: FirmwareProfile) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(profile_to_dict(profile), f, indent=2)
        f.write("\n")


def load_profile(path) -> FirmwareProfile:
    with open(path, encoding="utf-8") as f:
        return profile_from_dict(json.load(f))


def export_traces(path, traces: list[SramTrace], meta: dict | None = None):
    """Write traces as CSV: device_id,firmware_id,time_step,label,b0,...

    Optional meta entries go into leading '# key=value' comment lines.
    """
    if not traces:
        raise ValueError("no traces to export")
    width = len(traces[0].data)
    with open(path, "w", encoding="utf-8", newline="") as f:
        for k in sorted(meta or {}):
            f.write("# %s=%s\n" % (k, (meta or {})[k]))
        w = csv.writer(f)
        w.writerow(["device_id", "firmware_id", "time_step", "label"]
                   + ["b%d" % i for i in range(width)])
        for t in traces:
            if len(t.data) != width:
                raise ValueError("inconsistent trace lengths")
            w.writerow([t.device_id, t.firmware_id, t.time_step, t.label]
                       + [int(b) for b in t.data])


def import_traces(path) -> list[SramTrace]:
    """Read a trace CSV; raises ValueError naming the offending line."""
    with open(path, encoding="utf-8", newline="") as f:
        lineno = 0
        line = f.readline()
        while line.startswith("#"):
            lineno += 1
            line = f.readline()
        lineno += 1
        header = next(csv.reader([line])) if line else []
        if header[:4] != ["device_id", "firmware_id", "time_step", "label"]:
            raise ValueError("line %d: bad header" % lineno)
        width = len(header) - 4
        if width < 1 or header[4:] != ["b%d" % i for i in range(width)]:
            raise ValueError("line %d: bad byte column names" % lineno)
        traces = []
        for row in csv.reader(f):
            lineno += 1
            if len(row) != 4 + width:
                raise ValueError("line %d: expected %d fields, got %d"
                                 % (lineno, 4 + width, len(row)))
            try:
                step = int(row[2])
            except ValueError:
                raise ValueError("line %d: time_step is not an integer"
                                 % lineno) from None
            if step < 0:
                raise ValueError("line %d: negative time_step" % lineno)
            if row[3] not in LABELS:
                raise ValueError("line %d: label must be safe|unsafe" % lineno)
            try:
                data = np.array([int(x) for x in row[4:]], dtype=np.int64)
            except ValueError:
                raise ValueError("line %d: non-integer byte value"
                                 % lineno) from None
            if ((data < 0) | (data > 255)).any():
                raise ValueError("line %d: byte value out of range 0..255"
                                 % lineno)
            traces.append(SramTrace(device_id=row[0], firmware_id=row[1],
                                    time_step=step, label=row[3],
                                    data=data.astype(np.uint8)))
    return traces


def export_aggregates(path, features: np.ndarray, labels,
                      meta: dict | None = None) -> None:
    """Write aggregated features as CSV: label,f0,...,f{l-1}."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or len(features) != len(labels):
        raise ValueError("features must be (n, l) with one label per row")
    with open(path, "w", encoding="utf-8", newline="") as f:
        for k in sorted(meta or {}):
            f.write("# %s=%s\n" % (k, (meta or {})[k]))
        w = csv.writer(f)
        w.writerow(["label"] + ["f%d" % i for i in range(features.shape[1])])
        for lab, row in zip(labels, features):
            if lab not in LABELS:
                raise ValueError("label must be safe|unsafe")
            w.writerow([lab] + ["%.9f" % v for v in row])
