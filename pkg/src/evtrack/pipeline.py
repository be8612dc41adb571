"""End-to-end tracking session: slicing, encoding, fusion, windowing.

The session is streaming-first: frames and event batches arrive in time
order, slices are produced once the input watermark passes them, windows
refine as soon as they fill, and each slice is emitted exactly once. The
offline entry point feeds a whole sequence through the same path, so
offline and incremental runs are identical by construction.

Window hand-off: the overlapping W-T_step slices carry refined positions
and working features (detached); the T_step new slices replicate the last
refined position and the persistent template. Later windows overwrite
provisional positions of overlapping slices; a slice is only emitted when
it leaves the window (or at the end of the stream).
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, ops
from .correlation import CorrelationPyramid, WindowState, build_pyramid
from .encoders import EncoderConfig, FpnEncoder, MotionGatedFusion, mean_flow
from .errors import ConfigError, OrderingError, UsageError
from .events import EventStream, build_event_stack
from .refiner import RefinerConfig, TokenLayout, WindowRefiner

_UNBORN = np.iinfo(np.int64).max


@dataclass
class TrackerConfig:
    bins: int = 5  # event-stack bins per polarity
    window: int = 16  # W slices per refinement window
    t_step: int = 8  # window advance in slices
    iterations: int = 4  # refinement passes per window
    downsample: int = 4  # feature stride S
    channels: int = 128  # feature channels C
    radius: int = 3  # correlation offsets in [-r, r]
    levels: int = 4  # correlation pyramid levels
    dt_track_us: int = 5000  # slice period
    frame_channels: int = 1
    # refiner
    dim: int = 256
    pairs: int = 2
    heads: int = 4
    mlp_ratio: int = 4
    freqs: int = 16
    pos_wavelength: float = 512.0
    time_wavelength: float = 1_000_000.0
    # ablation toggles
    accumulate_mode: str = "since_frame"  # or "fixed"
    fixed_window_us: int = 0  # 0 -> dt_track_us
    time_embed: bool = True
    use_frames: bool = True
    use_events: bool = True

    def __post_init__(self):
        if not (1 <= self.t_step < self.window):
            raise ConfigError(
                f"need 1 <= t_step < window, got t_step={self.t_step}, window={self.window}"
            )
        if self.accumulate_mode not in ("since_frame", "fixed"):
            raise ConfigError(f"unknown accumulate_mode {self.accumulate_mode!r}")
        if self.dt_track_us <= 0:
            raise ConfigError(f"dt_track_us must be positive, got {self.dt_track_us}")
        if not (self.use_frames or self.use_events):
            raise ConfigError("at least one of use_frames/use_events must be set")

    def event_window_us(self) -> int:
        return self.fixed_window_us if self.fixed_window_us > 0 else self.dt_track_us


class TrackerModel:
    """All learnable pieces behind one ParamStore, built from a seed."""

    def __init__(self, cfg: TrackerConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        from .autodiff import ParamStore

        self.store = ParamStore()
        frame_cfg = EncoderConfig(
            channels=cfg.channels, downsample=cfg.downsample, in_channels=cfg.frame_channels
        )
        event_cfg = EncoderConfig(
            channels=cfg.channels,
            downsample=cfg.downsample,
            in_channels=2 * cfg.bins,
            input_scale=1.0 / max(1, cfg.bins - 1),
        )
        self.frame_encoder = FpnEncoder(self.store, "frame_enc", frame_cfg, rng)
        self.event_encoder = FpnEncoder(self.store, "event_enc", event_cfg, rng)
        self.fusion = MotionGatedFusion(self.store, "fusion", cfg.channels, rng)
        self.layout = TokenLayout(cfg.channels, cfg.levels, cfg.radius, cfg.freqs)
        rcfg = RefinerConfig(
            iterations=cfg.iterations,
            pairs=cfg.pairs,
            heads=cfg.heads,
            dim=cfg.dim,
            mlp_ratio=cfg.mlp_ratio,
            freqs=cfg.freqs,
            pos_wavelength=cfg.pos_wavelength,
            time_wavelength=cfg.time_wavelength,
        )
        self.refiner = WindowRefiner(self.store, "refiner", self.layout, rcfg, rng)


@dataclass
class Track:
    """Emitted samples for one query: (t_us, x, y), strictly increasing t."""

    id: int
    samples: list[tuple[int, float, float]] = field(default_factory=list)


@dataclass
class _SliceRecord:
    index: int
    t_frame: int
    t_slice: int
    duration_us: int
    pyramid: CorrelationPyramid


@dataclass
class _Carried:
    """Window overlap carried across a hand-off."""

    positions: np.ndarray  # (W - t_step, N, 2)
    features: Tensor  # (W - t_step, N, C), detached
    durations_us: np.ndarray
    start_index: int


@dataclass
class WindowRun:
    """One refinement's snapshots, kept for the training loss."""

    snapshots: list[Tensor]
    start_index: int
    slice_times: np.ndarray
    active: np.ndarray  # (W, N) float mask


def handoff(final_positions: np.ndarray, final_features: Tensor, durations_us: np.ndarray,
            t_step: int, start_index: int) -> _Carried:
    """Carry the trailing W-t_step slices of a refined window forward.

    Positions and features are detached copies of the refined values; the
    caller appends t_step fresh slices (replicated last position, template
    features) as they arrive.
    """
    return _Carried(
        positions=final_positions[t_step:].copy(),
        features=Tensor(final_features.data[t_step:].copy()),
        durations_us=durations_us[t_step:].copy(),
        start_index=start_index + t_step,
    )


class TrackSession:
    """Single-writer streaming tracker over one input sequence."""

    def __init__(self, model: TrackerModel, query_rows, record_windows: bool = False):
        self.model = model
        self.cfg = model.cfg
        rows = sorted(query_rows, key=lambda r: (r[1], r[0]))
        if not rows:
            raise UsageError("session needs at least one query")
        self.query_ids = [int(r[0]) for r in rows]
        if len(set(self.query_ids)) != len(self.query_ids):
            raise ConfigError("duplicate query ids")
        self.p_init = np.array([[r[2], r[3]] for r in rows], dtype=np.float32)
        self.t_birth = np.array([r[1] for r in rows], dtype=np.int64)
        n = len(rows)
        self._templates: list[Tensor | None] = [None] * n
        self._valid_from = np.full(n, _UNBORN, dtype=np.int64)

        self.record_windows = record_windows
        self.window_runs: list[WindowRun] = []

        self._frame_times: list[int] = []
        self._frame_raw: dict[int, np.ndarray] = {}
        self._frame_feats: dict[int, Tensor] = {}
        self._events: EventStream | None = None
        self._watermark: int | None = None
        self._last_frame_t: int | None = None
        self._last_event_t: int | None = None

        self._t_begin: int | None = None
        self._next_slice_t: int | None = None
        self._n_slices = 0
        self._slice_times: list[int] = []
        self._new_records: list[_SliceRecord] = []
        self._carried: _Carried | None = None
        self._pyramid_cache: dict[int, CorrelationPyramid] = {}
        self._latest_pos: dict[int, np.ndarray] = {}
        self._flow_pair = None  # (last, prev, active) refined positions
        self._emitted_through = 0
        self._emitted_samples: list[tuple[int, int, float, float]] = []
        self._finished = False

    # ------------------------------------------------------------------ input

    def advance(self, frame=None, events=None):
        """Feed the next frame (t_us, image) or event batch; returns new samples."""
        if self._finished:
            raise UsageError("session already finished")
        last_slice = self._slice_times[-1] if self._slice_times else None
        if frame is not None:
            t, image = frame
            t = int(t)
            if self._last_frame_t is not None and t < self._last_frame_t:
                raise OrderingError(f"frame at {t} after frame at {self._last_frame_t}")
            if last_slice is not None and t <= last_slice and t not in self._frame_raw:
                raise OrderingError(f"frame at {t} arrived after slices past it were processed")
            self._last_frame_t = t
            if t not in self._frame_raw:
                bisect.insort(self._frame_times, t)
                self._frame_raw[t] = np.asarray(image, dtype=np.float32)
            self._watermark = t if self._watermark is None else max(self._watermark, t)
        if events is not None:
            batch = events if isinstance(events, EventStream) else EventStream(*events)
            if len(batch):
                t0, t1 = int(batch.ts[0]), int(batch.ts[-1])
                if self._last_event_t is not None and t0 < self._last_event_t:
                    raise OrderingError(f"event batch starts at {t0} before {self._last_event_t}")
                if last_slice is not None and t0 <= last_slice:
                    raise OrderingError("events arrived for already-processed slices")
                self._append_events(batch)
                self._last_event_t = t1
                self._watermark = t1 if self._watermark is None else max(self._watermark, t1)
        return self._pump(flush=False)

    def finish(self):
        """Flush remaining slices, refine any trailing partial window, emit all."""
        if self._finished:
            return []
        emitted = self._pump(flush=True)
        if self._new_records:
            emitted += self._refine_and_emit(final=True)
        elif self._n_slices:
            emitted += self._emit_range(self._emitted_through, self._n_slices)
        self._finished = True
        return emitted

    def tracks(self) -> list[Track]:
        by_id = {qid: Track(qid) for qid in self.query_ids}
        for qid, t, x, y in self._emitted_samples:
            by_id[qid].samples.append((t, x, y))
        return [by_id[qid] for qid in self.query_ids]

    # -------------------------------------------------------------- internals

    def _append_events(self, batch: EventStream):
        if self._events is None:
            self._events = batch
            return
        if batch.geometry != self._events.geometry:
            raise ConfigError("event geometry changed mid-stream")
        self._events = EventStream(
            np.concatenate([self._events.xs, batch.xs]),
            np.concatenate([self._events.ys, batch.ys]),
            np.concatenate([self._events.ts, batch.ts]),
            np.concatenate([self._events.ps, batch.ps]),
            batch.geometry,
        )

    def _frame_features(self, t_frame: int) -> Tensor:
        if t_frame not in self._frame_feats:
            self._frame_feats[t_frame] = self.model.frame_encoder(Tensor(self._frame_raw[t_frame]))
        return self._frame_feats[t_frame]

    def _next_slice_time(self) -> int | None:
        if self._t_begin is None:
            if not self._frame_times:
                return None
            self._t_begin = self._frame_times[0]
            self._next_slice_t = self._t_begin
        if not self.cfg.use_events:
            # frames-only ablation: the slice grid is the frame times
            i = bisect.bisect_left(self._frame_times, self._next_slice_t)
            return self._frame_times[i] if i < len(self._frame_times) else None
        return self._next_slice_t

    def _pump(self, flush: bool):
        emitted = []
        while True:
            t_slice = self._next_slice_time()
            if t_slice is None or self._watermark is None:
                break
            if flush:
                if t_slice > self._watermark:
                    break
            elif t_slice >= self._watermark:
                break
            self._process_slice(t_slice)
            self._next_slice_t = t_slice + (self.cfg.dt_track_us if self.cfg.use_events else 1)
            need = self.cfg.window if self._carried is None else self.cfg.t_step
            if len(self._new_records) == need:
                emitted += self._refine_and_emit(final=False)
        return emitted

    def _gate_input(self) -> float:
        if self._flow_pair is None:
            return 0.0
        last, prev, active = self._flow_pair
        return mean_flow(last, prev, active)

    def _event_geometry(self):
        if self._events is not None:
            return self._events.geometry
        img = self._frame_raw[self._frame_times[0]]
        return (img.shape[-1], img.shape[-2])

    def _process_slice(self, t_slice: int):
        cfg = self.cfg
        idx = self._n_slices
        fi = bisect.bisect_right(self._frame_times, t_slice) - 1
        if fi < 0:
            raise UsageError(f"no frame at or before slice time {t_slice}")
        t_frame = self._frame_times[fi]

        t_ev0 = t_frame if cfg.accumulate_mode == "since_frame" else t_slice - cfg.event_window_us()
        duration = max(0, t_slice - t_ev0)

        if cfg.use_events:
            x_ext, y_ext = self._event_geometry()
            if duration > 0 and self._events is not None:
                raw = build_event_stack(self._events, t_ev0, t_slice, cfg.bins).channel_first()
            else:
                # a slice coinciding with its frame accumulates no events yet
                raw = np.zeros((2 * cfg.bins, y_ext, x_ext), dtype=np.float32)
            f_event = self.model.event_encoder(Tensor(raw))
            f_image = self._frame_features(t_frame) if cfg.use_frames else None
            fused = self.model.fusion(
                f_image, f_event, self._gate_input(),
                use_frames=cfg.use_frames, use_events=True,
            )
        else:
            fused = self._frame_features(t_frame)
            duration = 0

        pyramid = build_pyramid(fused, cfg.levels, cfg.downsample)
        self._new_records.append(_SliceRecord(idx, t_frame, t_slice, duration, pyramid))
        self._slice_times.append(t_slice)
        self._n_slices += 1

        newly = (self._valid_from == _UNBORN) & (self.t_birth <= t_slice)
        for n in np.nonzero(newly)[0]:
            self._valid_from[n] = idx
            self._sample_template(int(n), fused)

    def _sample_template(self, n: int, fused: Tensor):
        cfg = self.cfg
        if cfg.use_frames:
            t_birth = int(self.t_birth[n])
            if t_birth not in self._frame_raw:
                raise UsageError(
                    f"query {self.query_ids[n]} born at {t_birth}, which is not a frame time"
                )
            source = self._frame_features(t_birth)
        else:
            # events-only ablation: template from the first fused map instead
            source = fused
        pts = (self.p_init[n : n + 1] / cfg.downsample).astype(np.float32)
        self._templates[n] = ops.getitem(ops.bilinear_sample(source, pts), 0)

    def _template_matrix(self) -> Tensor:
        zero = None
        cols = []
        for tpl in self._templates:
            if tpl is None:
                if zero is None:
                    zero = Tensor(np.zeros(self.cfg.channels, dtype=np.float32))
                cols.append(zero)
            else:
                cols.append(tpl)
        return ops.stack(cols, axis=0)

    def _assemble_state(self) -> WindowState:
        records = self._new_records
        templates = self._template_matrix()
        new_len = len(records)
        if self._carried is None:
            positions = np.repeat(self.p_init[None], new_len, axis=0)
            features = ops.stack([templates] * new_len, axis=0)
            durations = np.array([r.duration_us for r in records], dtype=np.int64)
            start = records[0].index
        else:
            last = self._carried.positions[-1]
            positions = np.concatenate(
                [self._carried.positions, np.repeat(last[None], new_len, axis=0)], axis=0
            )
            features = ops.concat(
                [self._carried.features, ops.stack([templates] * new_len, axis=0)], axis=0
            )
            durations = np.concatenate(
                [self._carried.durations_us, [r.duration_us for r in records]]
            ).astype(np.int64)
            start = self._carried.start_index
        w_len = positions.shape[0]
        times = np.array(self._slice_times[start : start + w_len], dtype=np.int64)
        return WindowState(
            positions=positions.astype(np.float32),
            features=features,
            durations_us=durations,
            slice_times=times,
            valid_from=self._valid_from.copy(),
            start_index=start,
        )

    def _window_pyramids(self, state: WindowState) -> list[CorrelationPyramid]:
        by_index = dict(self._pyramid_cache)
        for rec in self._new_records:
            by_index[rec.index] = rec.pyramid
        pyramids = [by_index[state.start_index + i] for i in range(state.window)]
        self._pyramid_cache = {state.start_index + i: p for i, p in enumerate(pyramids)}
        return pyramids

    def _refine_and_emit(self, final: bool):
        cfg = self.cfg
        state = self._assemble_state()
        pyramids = self._window_pyramids(state)
        snapshots, pos_final, feats_final = self.model.refiner.refine(
            state, pyramids, self.p_init, time_embed=cfg.time_embed
        )
        pos_data = pos_final.data

        for i in range(state.window):
            self._latest_pos[state.start_index + i] = pos_data[i].copy()
        if state.window >= 2:
            active = (state.start_index + state.window - 1) >= self._valid_from
            self._flow_pair = (pos_data[-1].copy(), pos_data[-2].copy(), active)

        if self.record_windows:
            self.window_runs.append(
                WindowRun(snapshots, state.start_index, state.slice_times.copy(), state.active_mask())
            )

        if final:
            emitted = self._emit_range(self._emitted_through, state.start_index + state.window)
        else:
            emitted = self._emit_range(self._emitted_through, state.start_index + cfg.t_step)
            self._carried = handoff(pos_data, feats_final, state.durations_us, cfg.t_step,
                                    state.start_index)
        self._new_records = []
        return emitted

    def _emit_range(self, lo: int, hi: int):
        emitted = []
        for idx in range(lo, hi):
            pos = self._latest_pos[idx]
            t = self._slice_times[idx]
            for n, qid in enumerate(self.query_ids):
                if self._valid_from[n] <= idx:
                    emitted.append((qid, t, float(pos[n, 0]), float(pos[n, 1])))
        self._emitted_through = max(self._emitted_through, hi)
        self._emitted_samples.extend(emitted)
        return emitted


def run_offline(model: TrackerModel, frames, events: EventStream, query_rows,
                record_windows: bool = False):
    """Track a whole sequence: feed inputs in merged time order, then flush.

    `frames` is a list of (t_us, image) pairs. Returns (tracks, session).
    """
    session = TrackSession(model, query_rows, record_windows=record_windows)
    frames = sorted(frames, key=lambda p: p[0])
    cursor = 0
    for t_frame, image in frames:
        hi = int(np.searchsorted(events.ts, t_frame, side="left"))
        if hi > cursor:
            session.advance(events=_slice_stream(events, cursor, hi))
            cursor = hi
        session.advance(frame=(t_frame, image))
    if cursor < len(events):
        session.advance(events=_slice_stream(events, cursor, len(events)))
    session.finish()
    return session.tracks(), session


def _slice_stream(events: EventStream, lo: int, hi: int) -> EventStream:
    return EventStream(
        events.xs[lo:hi], events.ys[lo:hi], events.ts[lo:hi], events.ps[lo:hi], events.geometry
    )


def save_tracks_csv(tracks: list[Track], path: str) -> None:
    """Write "track_id,t_us,x,y" rows with 3-decimal fixed-point pixels."""
    with open(path, "w") as f:
        f.write("track_id,t_us,x,y\n")
        for track in tracks:
            for t, x, y in track.samples:
                f.write(f"{track.id},{t},{x:.3f},{y:.3f}\n")


def load_tracks_csv(path: str) -> dict[int, list[tuple[int, float, float]]]:
    out: dict[int, list[tuple[int, float, float]]] = {}
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("track_id"):
                continue
            parts = line.split(",")
            if len(parts) != 4:
                raise ConfigError(f"bad track row: {line!r}")
            out.setdefault(int(parts[0]), []).append((int(parts[1]), float(parts[2]), float(parts[3])))
    return out
