"""Deterministic generator of household episodes with templated QA.

An episode is a single actor interacting with a handful of objects. Every
frame carries the static object-object relations, the actor's current
location edge, and at most one action edge. Consecutive frames always
differ (either an action event fires or the actor moves), and raw frames
are padded with exact duplicates so compaction has real work to do and the
preserved indices carry duration information.

Compacted episode lengths are drawn from a shifted lognormal fitted to a
positively skewed target (median 20, 5th percentile 7, 95th percentile 46).
The number of *action events* per episode stays small (3..7) so the event
structure remains compressible; the remaining frames are movement.

Answers are produced by per-template extractors over the event log and
re-checked against the events visible in the compacted frames, so a
generated answer can never contradict the graphs the model sees.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .sg import DynamicGraph, QASample, SceneGraph, compact

OPENABLE = ("cabinet", "refrigerator", "door", "drawer", "box", "laptop", "oven", "window")
HOLDABLE = ("cup", "dish", "book", "apple", "bottle", "phone", "towel", "pillow", "knife", "sandwich", "remote", "toy")
SITTABLE = ("chair", "sofa", "bed", "stool", "bench")
ANCHORS = ("table", "shelf", "counter", "floor", "sink", "lamp")

SPATIAL_PREDS = ("on", "near", "inside")
EVENT_VERBS = ("opens", "closes", "picks_up", "puts_down", "sits_on", "throws", "looks_at")
EXISTS_VERBS = ("opens", "picks_up", "sits_on", "throws", "looks_at")

VERB_FORMS = {
    "holds": ("hold", "held"),
    "opens": ("open", "opened"),
    "closes": ("close", "closed"),
    "picks_up": ("pick up", "picked up"),
    "puts_down": ("put down", "put down"),
    "sits_on": ("sit on", "sat on"),
    "throws": ("throw", "threw"),
    "looks_at": ("look at", "looked at"),
}

COUNT_WORDS = ("zero", "one", "two", "three", "four")

VERB_CATEGORY = {
    "opens": "openable",
    "closes": "openable",
    "picks_up": "holdable",
    "puts_down": "holdable",
    "throws": "holdable",
    "sits_on": "sittable",
    "looks_at": "any",
}


@dataclass(frozen=True)
class WorldSpec:
    openable: tuple = OPENABLE
    holdable: tuple = HOLDABLE
    sittable: tuple = SITTABLE
    anchors: tuple = ANCHORS
    min_objects: int = 5
    max_objects: int = 8
    min_events: int = 3
    max_events: int = 7
    # shifted lognormal for compacted lengths: round(scale * exp(sigma z) + shift)
    length_scale: float = 26.0
    length_shift: float = -6.0
    length_sigma: float = 0.42135
    min_length: int = 3
    max_repeat: int = 3
    qa_min: int = 3
    qa_max: int = 6

    def category_of(self, obj):
        if obj in self.openable:
            return "openable"
        if obj in self.holdable:
            return "holdable"
        if obj in self.sittable:
            return "sittable"
        return "anchor"


@dataclass
class Event:
    t: int  # raw frame index (preserved by compaction)
    verb: str
    obj: str


@dataclass
class Episode:
    objects: list
    statics: list  # (obj, pred, obj) fixed relations
    dg: DynamicGraph
    events: list = field(default_factory=list)


def sample_compacted_length(spec: WorldSpec, rng) -> int:
    z = rng.standard_normal()
    val = spec.length_scale * np.exp(spec.length_sigma * z) + spec.length_shift
    return max(spec.min_length, int(round(val)))


def _render_frame(objects, statics, near_target, action):
    """action: (verb, obj) or None."""
    labels = ["person"] + objects
    index = {lab: i for i, lab in enumerate(labels)}
    edges = [(index[a], index[b], pred) for a, pred, b in statics]
    edges.append((index["person"], index[near_target], "near"))
    if action is not None:
        verb, obj = action
        edges.append((index["person"], index[obj], verb))
    return SceneGraph(nodes=tuple(enumerate(labels)), edges=tuple(edges))


_VERB_WEIGHT = {"picks_up": 3.0, "opens": 2.0, "closes": 2.0, "sits_on": 1.0, "looks_at": 1.0}


def _feasible_events(state, spec):
    """Instantaneous events available from the current state."""
    opts = []
    if state["holding"] is not None:
        held = state["holding"]
        opts.append(("puts_down", held))
        opts.append(("throws", held))
        return opts
    for o in state["objects"]:
        cat = spec.category_of(o)
        if cat == "openable":
            opts.append(("closes", o) if state["open"].get(o) else ("opens", o))
        elif cat == "holdable":
            opts.append(("picks_up", o))
        elif cat == "sittable":
            opts.append(("sits_on", o))
        opts.append(("looks_at", o))
    return opts


def _pick_event(opts, rng):
    """Weighted verb sampling: interactions over glances."""
    w = np.array([_VERB_WEIGHT.get(v, 1.0) for v, _ in opts])
    return opts[int(rng.choice(len(opts), p=w / w.sum()))]


def simulate_episode(spec: WorldSpec, rng, global_unique=False) -> Episode:
    n_obj = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    pool = list(spec.openable + spec.holdable + spec.sittable + spec.anchors)
    objects = list(rng.choice(pool, size=n_obj, replace=False))
    # fixed object-object relations, 3..6 of them, acyclic by construction
    statics = []
    shuffled = list(rng.permutation(objects))
    for i in range(min(len(shuffled) - 1, int(rng.integers(3, 7)))):
        pred = SPATIAL_PREDS[int(rng.integers(0, len(SPATIAL_PREDS)))]
        statics.append((shuffled[i], pred, shuffled[i + 1]))

    length = sample_compacted_length(spec, rng)
    n_events = min(int(rng.integers(spec.min_events, spec.max_events + 1)), length - 1)
    event_steps = set(rng.choice(np.arange(1, length), size=n_events, replace=False).tolist()) if n_events else set()

    state = {"holding": None, "open": {}, "objects": objects}
    near = objects[int(rng.integers(0, len(objects)))]
    frames_compact = [_render_frame(objects, statics, near, None)]
    actions_by_step = [None]
    prev_edge = None  # action edge of the previous frame, including hold carryover
    events = []

    for step in range(1, length):
        if step in event_steps:
            # an event repeating the previous frame's action edge would render
            # an identical frame and vanish in compaction
            opts = [o for o in _feasible_events(state, spec) if o != prev_edge]
            verb, obj = _pick_event(opts, rng)
            if verb == "picks_up":
                state["holding"] = obj
            elif verb in ("puts_down", "throws"):
                state["holding"] = None
            elif verb == "opens":
                state["open"][obj] = True
            elif verb == "closes":
                state["open"][obj] = False
            action = (verb, obj)
            events.append(Event(t=-1, verb=verb, obj=obj))  # t assigned after raw expansion
            actions_by_step.append(action)
            frames_compact.append(_render_frame(objects, statics, near, action))
            prev_edge = action
        else:
            # movement step; while holding, the persistent hold edge rides along
            choices = [o for o in objects if o != near]
            near = choices[int(rng.integers(0, len(choices)))]
            action = ("holds", state["holding"]) if state["holding"] is not None else None
            actions_by_step.append(None)
            frames_compact.append(_render_frame(objects, statics, near, action))
            prev_edge = action

    # expand to raw frames with duplicate padding; remember raw index per step
    raw_frames = []
    step_t = []
    ev_i = 0
    for step, frame in enumerate(frames_compact):
        step_t.append(len(raw_frames))
        repeats = 1 + int(rng.integers(0, spec.max_repeat + 1))
        raw_frames.extend([frame] * repeats)
    for step, action in enumerate(actions_by_step):
        if action is not None and action[0] != "holds":
            events[ev_i].t = step_t[step]
            ev_i += 1

    dg = compact(raw_frames, global_unique=global_unique)
    if not global_unique and len(dg) != length:
        raise ConfigError(f"compaction mismatch: built {length} distinct frames, kept {len(dg)}")
    return Episode(objects=objects, statics=statics, dg=dg, events=events)


# ---------------------------------------------------------------------------
# event extraction from what the model actually sees


def events_from_frames(dg: DynamicGraph):
    """Re-derive the instantaneous event log from compacted frames."""
    out = []
    for g, t in dg.frames:
        labels = g.label_of()
        for s, d, pred in g.edges:
            if pred in EVENT_VERBS and labels[s] == "person":
                out.append(Event(t=t, verb=pred, obj=labels[d]))
    return out


def hold_spans(events):
    """(obj, t_pick, t_release) for completed holds, in pick order."""
    spans = []
    current = None
    for ev in events:
        if ev.verb == "picks_up":
            current = (ev.obj, ev.t)
        elif ev.verb in ("puts_down", "throws") and current is not None:
            spans.append((current[0], current[1], ev.t))
            current = None
    return spans


# ---------------------------------------------------------------------------
# template extractors (None = unsatisfiable on this episode)


def answer_after(events, v1, v2, obj):
    anchor = next((i for i, e in enumerate(events) if e.verb == v2 and e.obj == obj), None)
    if anchor is None:
        return None
    return next((e.obj for e in events[anchor + 1 :] if e.verb == v1), None)


def answer_before(events, v1, v2, obj):
    anchor = next((i for i, e in enumerate(events) if e.verb == v2 and e.obj == obj), None)
    if anchor is None:
        return None
    prior = [e.obj for e in events[:anchor] if e.verb == v1]
    return prior[-1] if prior else None


def answer_held(events, which):
    picks = [e.obj for e in events if e.verb == "picks_up"]
    if not picks:
        return None
    return picks[0] if which == "first" else picks[-1]


def answer_exists(events, verb, obj):
    return "yes" if any(e.verb == verb and e.obj == obj for e in events) else "no"


def answer_duration(events, o1, o2):
    spans = {o: t1 - t0 for o, t0, t1 in hold_spans(events)}
    if o1 not in spans or o2 not in spans or spans[o1] == spans[o2]:
        return None
    return "yes" if spans[o1] > spans[o2] else "no"


def answer_count_held(events):
    n = len({e.obj for e in events if e.verb == "picks_up"})
    if n >= len(COUNT_WORDS):
        return None
    return COUNT_WORDS[n]


# ---------------------------------------------------------------------------
# question instantiation


def _q_after(rng, events):
    combos = []
    for i, anchor in enumerate(events):
        later_verbs = {e.verb for e in events[i + 1 :]}
        for v1 in later_verbs:
            if v1 != anchor.verb:
                combos.append((v1, anchor.verb, anchor.obj))
    rng.shuffle(combos)
    for v1, v2, obj in combos:
        ans = answer_after(events, v1, v2, obj)
        # answers equal to the anchor object would be copyable from the
        # question text, bypassing temporal reasoning
        if ans is not None and ans != obj:
            q = f"which object did the person {VERB_FORMS[v1][0]} after they {VERB_FORMS[v2][1]} the {obj} ?"
            return q, ans
    return None


def _q_before(rng, events):
    combos = []
    for i, anchor in enumerate(events):
        earlier_verbs = {e.verb for e in events[:i]}
        for v1 in earlier_verbs:
            if v1 != anchor.verb:
                combos.append((v1, anchor.verb, anchor.obj))
    rng.shuffle(combos)
    for v1, v2, obj in combos:
        ans = answer_before(events, v1, v2, obj)
        if ans is not None and ans != obj:
            q = f"which object did the person {VERB_FORMS[v1][0]} before they {VERB_FORMS[v2][1]} the {obj} ?"
            return q, ans
    return None


def _q_exists(rng, events, episode, spec):
    want_yes = bool(rng.integers(0, 2))
    positives = [(e.verb, e.obj) for e in events if e.verb in EXISTS_VERBS]
    negatives = []
    for verb in EXISTS_VERBS:
        cat = VERB_CATEGORY[verb]
        for obj in episode.objects:
            if cat != "any" and spec.category_of(obj) != cat:
                continue
            if not any(e.verb == verb and e.obj == obj for e in events):
                negatives.append((verb, obj))
    pool = positives if want_yes else negatives
    if not pool:
        pool = negatives if want_yes else positives
    if not pool:
        return None
    verb, obj = pool[int(rng.integers(0, len(pool)))]
    ans = answer_exists(events, verb, obj)
    return f"did the person ever {VERB_FORMS[verb][0]} the {obj} ?", ans


def _q_held(rng, events, which):
    ans = answer_held(events, which)
    if ans is None:
        return None
    return f"what did the person hold {which} ?", ans


def _q_duration(rng, events):
    spans = hold_spans(events)
    objs = list({o for o, _, _ in spans})
    if len(objs) < 2:
        return None
    rng.shuffle(objs)
    o1, o2 = objs[0], objs[1]
    ans = answer_duration(events, o1, o2)
    if ans is None:
        return None
    return f"did the person hold the {o1} longer than the {o2} ?", ans


def _q_count(rng, events):
    ans = answer_count_held(events)
    if ans is None:
        return None
    return f"how many different objects did the person pick up ?", ans


TEMPLATES = ("after", "before", "exists", "what_held_first", "what_held_last", "duration_compare", "count_distinct")


def episode_qa(episode: Episode, spec: WorldSpec, rng):
    """Instantiate 3..6 templates; unsatisfiable ones are skipped."""
    events = events_from_frames(episode.dg)
    builders = {
        "after": lambda: _q_after(rng, events),
        "before": lambda: _q_before(rng, events),
        "exists": lambda: _q_exists(rng, events, episode, spec),
        "what_held_first": lambda: _q_held(rng, events, "first"),
        "what_held_last": lambda: _q_held(rng, events, "last"),
        "duration_compare": lambda: _q_duration(rng, events),
        "count_distinct": lambda: _q_count(rng, events),
    }
    n_qa = int(rng.integers(spec.qa_min, spec.qa_max + 1))
    priority = ["after", "before", "exists"]
    rest = [t for t in TEMPLATES if t not in priority]
    rng.shuffle(rest)
    out = []
    for tid in priority + rest:
        if len(out) >= n_qa:
            break
        built = builders[tid]()
        if built is None:
            continue
        q, a = built
        out.append((tid, q, a))
    return out


def generate_corpus(n_episodes, seed, spec: WorldSpec = None, global_unique=False):
    """Deterministic corpus of QA samples, split 80/10/10 by episode."""
    if n_episodes < 1:
        raise ConfigError("need at least one episode")
    spec = spec or WorldSpec()
    samples = []
    for ep_idx in range(n_episodes):
        rng = np.random.default_rng([seed, ep_idx])
        episode = simulate_episode(spec, rng, global_unique=global_unique)
        split = "val" if ep_idx % 10 == 8 else "test" if ep_idx % 10 == 9 else "train"
        for tid, q, a in episode_qa(episode, spec, rng):
            samples.append(
                QASample(dg=episode.dg, question=q, answer=a, template_id=tid, split=split)
            )
    return samples


def corpus_texts(samples):
    """Every question and answer string (tokenizer vocabulary source)."""
    for s in samples:
        yield s.question
        yield s.answer
