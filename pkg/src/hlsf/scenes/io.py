"""JSON Lines persistence for scenes, one scene per line."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, Iterator

from hlsf.errors import InvalidInputError, SceneParseError
from hlsf.scenes.core import AgentTrack, Scene, VectorMap


def scene_to_dict(scene: Scene) -> dict:
    return {
        "scene_id": scene.scene_id,
        "psi": float(scene.psi),
        "H": int(scene.H),
        "T": int(scene.T),
        "map": {
            "segments": [{"id": k, "pts": v.tolist()} for k, v in scene.map.segments.items()],
            "succ": {k: list(v) for k, v in scene.map.succ.items()},
            "pred": {k: list(v) for k, v in scene.map.pred.items()},
        },
        "tracks": [{"agent_id": tr.agent_id, "pts": tr.positions.tolist(),
                    "valid": [bool(v) for v in tr.valid]} for tr in scene.tracks],
        "targets": list(scene.targets),
        "gt_lane_hint": dict(scene.gt_lane_hint),
    }


def _field(obj, key, kind, line, where=""):
    if not isinstance(obj, dict) or key not in obj:
        raise SceneParseError(line, f"missing field {where}{key}")
    val = obj[key]
    ok = {
        "str": isinstance(val, str),
        "num": isinstance(val, (int, float)) and not isinstance(val, bool),
        "int": isinstance(val, int) and not isinstance(val, bool),
        "list": isinstance(val, list),
        "dict": isinstance(val, dict),
    }[kind]
    if not ok:
        raise SceneParseError(line, f"field {where}{key} has wrong type (expected {kind})")
    return val


def _points(val, line, where):
    if not all(isinstance(p, list) and len(p) == 2
               and all(isinstance(c, (int, float)) and not isinstance(c, bool) for c in p)
               for p in val):
        raise SceneParseError(line, f"field {where} must be a list of [x, y] pairs")
    return val


def scene_from_dict(d: dict, line: int = 1) -> Scene:
    scene_id = _field(d, "scene_id", "str", line)
    psi = _field(d, "psi", "num", line)
    H = _field(d, "H", "int", line)
    T = _field(d, "T", "int", line)
    m = _field(d, "map", "dict", line)
    segs = _field(m, "segments", "list", line, "map.")
    succ = _field(m, "succ", "dict", line, "map.")
    pred = _field(m, "pred", "dict", line, "map.")
    segments = {}
    for i, s in enumerate(segs):
        where = f"map.segments[{i}]."
        sid = _field(s, "id", "str", line, where)
        segments[sid] = _points(_field(s, "pts", "list", line, where), line, where + "pts")
    tracks = []
    for i, tr in enumerate(_field(d, "tracks", "list", line)):
        where = f"tracks[{i}]."
        aid = _field(tr, "agent_id", "str", line, where)
        pts = _points(_field(tr, "pts", "list", line, where), line, where + "pts")
        valid = _field(tr, "valid", "list", line, where)
        if not all(isinstance(v, bool) for v in valid):
            raise SceneParseError(line, f"field {where}valid must hold booleans")
        tracks.append((aid, pts, valid))
    targets = _field(d, "targets", "list", line)
    hint = _field(d, "gt_lane_hint", "dict", line)
    try:
        scene = Scene(scene_id=scene_id, psi=float(psi), H=H, T=T,
                      map=VectorMap(segments, succ, pred),
                      tracks=[AgentTrack(a, p, v) for a, p, v in tracks],
                      targets=[str(t) for t in targets],
                      gt_lane_hint={str(k): str(v) for k, v in hint.items()})
        return scene.validate()
    except InvalidInputError as exc:
        raise SceneParseError(line, str(exc)) from exc


def dumps_scene(scene: Scene) -> str:
    return json.dumps(scene_to_dict(scene), separators=(",", ":"), ensure_ascii=False)


def write_scenes(path, scenes: Iterable[Scene]) -> int:
    """Write scenes to ``path``; returns the number written."""
    n = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for scene in scenes:
            fh.write(dumps_scene(scene))
            fh.write("\n")
            n += 1
    return n


def read_scenes(path) -> Iterator[Scene]:
    """Stream scenes from a JSON Lines file, validating each line."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    with open(path, encoding="utf-8") as fh:
        for i, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                d = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise SceneParseError(i, f"invalid JSON ({exc.msg})") from exc
            yield scene_from_dict(d, i)


def scene_io(path, mode: str, scenes: Iterable[Scene] | None = None):
    """Read (``mode="read"``) or write (``mode="write"``) a scene file."""
    if mode == "read":
        return read_scenes(path)
    if mode == "write":
        if scenes is None:
            raise InvalidInputError("write mode needs scenes")
        return write_scenes(path, scenes)
    raise InvalidInputError(f"unknown mode {mode!r}")
