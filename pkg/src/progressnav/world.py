"""Synthetic continuous 2D navigation world.

Occupancy grid plus point agent with parameterized forward/turn/stop actions,
symbolic egocentric observations, a procedural clause-structured instruction
generator, and a greedy shortest-path expert.  Everything is deterministic
per seed.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .serial import canonical_json, rle_decode, rle_encode

ACTION_TOKENS = ("F25", "F50", "F75", "L15", "L30", "L45", "R15", "R30", "R45", "STOP")
ACTION_INDEX = {a: i for i, a in enumerate(ACTION_TOKENS)}
FORWARD_DIST = {"F25": 0.25, "F50": 0.50, "F75": 0.75}
TURN_ANGLE = {"L15": 15.0, "L30": 30.0, "L45": 45.0, "R15": -15.0, "R30": -30.0, "R45": -45.0}

LANDMARK_KINDS = (
    "DOOR", "TABLE", "CORRIDOR", "STAIRS", "PLANT", "WINDOW",
    "SHELF", "LAMP", "SOFA", "SINK", "DESK", "MIRROR",
)
CODE_FREE = 0
CODE_WALL = 1
CODE_LANDMARK_BASE = 2  # landmark kind i -> code 2 + i
N_CELL_CODES = CODE_LANDMARK_BASE + len(LANDMARK_KINDS)
CODE_OCCLUDED = N_CELL_CODES  # patch cell hidden behind a wall
N_PATCH_CODES = N_CELL_CODES + 1

PATCH_SIZE = 7
PATCH_HALF = PATCH_SIZE // 2
MAX_EPISODE_STEPS = 120

# instruction vocabulary (model-side Vocab adds EOS/PAD)
INSTR_WORDS = (
    "GO", "TURN", "STOP_AT", "TO", "THE", "THEN", "AND",
    "LEFT", "RIGHT", "WALK", "UNTIL", "YOU", "REACH", ";",
) + LANDMARK_KINDS


class WorldGenError(Exception):
    pass


@dataclass(frozen=True)
class WorldSpec:
    seed: int
    extent: float = 12.0
    cell: float = 0.25
    n_rooms: int = 3
    n_landmarks: int = 8
    success_radius: float = 1.0

    def to_dict(self) -> dict:
        return {
            "seed": self.seed, "extent": self.extent, "cell": self.cell,
            "n_rooms": self.n_rooms, "n_landmarks": self.n_landmarks,
            "success_radius": self.success_radius,
        }

    @staticmethod
    def from_dict(d: dict) -> "WorldSpec":
        return WorldSpec(**d)


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    heading: float  # degrees in [0, 360)

    def normalized(self) -> "Pose":
        return Pose(self.x, self.y, self.heading % 360.0)


@dataclass(frozen=True)
class Observation:
    patch: np.ndarray          # (7,7) int cell codes, row 0 = furthest front
    prev_action: int           # index into ACTION_TOKENS, -1 for none
    step_index: int

    def features(self) -> np.ndarray:
        onehot = np.zeros((PATCH_SIZE, PATCH_SIZE, N_PATCH_CODES))
        rr, cc = np.meshgrid(np.arange(PATCH_SIZE), np.arange(PATCH_SIZE), indexing="ij")
        onehot[rr, cc, self.patch] = 1.0
        act = np.zeros(len(ACTION_TOKENS))
        if self.prev_action >= 0:
            act[self.prev_action] = 1.0
        scaled = min(self.step_index / MAX_EPISODE_STEPS, 1.0)
        return np.concatenate([onehot.ravel(), act, [scaled]])

    def to_record(self) -> dict:
        return {
            "patch": rle_encode(self.patch),
            "prev_action": self.prev_action,
            "step_index": self.step_index,
        }

    @staticmethod
    def from_record(d: dict) -> "Observation":
        patch = rle_decode(d["patch"]).reshape(PATCH_SIZE, PATCH_SIZE)
        return Observation(patch=patch, prev_action=d["prev_action"], step_index=d["step_index"])


FEATURE_DIM = PATCH_SIZE * PATCH_SIZE * N_PATCH_CODES + len(ACTION_TOKENS) + 1


@dataclass(frozen=True)
class Instruction:
    tokens: tuple[str, ...]
    clause_token_spans: tuple[tuple[int, int], ...]  # half-open token spans
    clause_step_spans: tuple[tuple[int, int], ...]   # half-open step spans (eval-only)

    def aligned_prefix_length(self, t: int) -> int:
        """Token count of clauses 1..c for the clause whose step span contains t."""
        for (ts, te), (s, e) in zip(self.clause_token_spans, self.clause_step_spans):
            if s <= t < e:
                return te
        raise ValueError(f"step {t} outside all clause spans")


@dataclass(frozen=True)
class Episode:
    spec: WorldSpec
    episode_seed: int
    start: Pose
    goal: tuple[float, float]
    instruction: Instruction
    actions: tuple[str, ...]              # expert actions, ends with STOP
    observations: tuple[Observation, ...]
    waypoints: tuple[tuple[int, int], ...]  # grid cells, last is the goal cell
    shortest_path_length: float            # reference (expert) travel distance, meters

    @property
    def episode_id(self) -> str:
        return f"w{self.spec.seed}e{self.episode_seed}"


class World:
    def __init__(self, spec: WorldSpec, grid: np.ndarray, landmarks: dict[str, tuple[int, int]]):
        self.spec = spec
        self.grid = grid  # (n, n) cell codes, index [ix, iy]
        self.landmarks = landmarks
        self.n = grid.shape[0]

    def cell_of(self, x: float, y: float) -> tuple[int, int]:
        return int(math.floor(x / self.spec.cell)), int(math.floor(y / self.spec.cell))

    def cell_center(self, ix: int, iy: int) -> tuple[float, float]:
        c = self.spec.cell
        return (ix + 0.5) * c, (iy + 0.5) * c

    def code_at(self, x: float, y: float) -> int:
        ix, iy = self.cell_of(x, y)
        if not (0 <= ix < self.n and 0 <= iy < self.n):
            return CODE_WALL
        return int(self.grid[ix, iy])

    def is_free(self, x: float, y: float) -> bool:
        return self.code_at(x, y) == CODE_FREE

    def free_mask(self) -> np.ndarray:
        return self.grid == CODE_FREE


def generate_world(spec: WorldSpec) -> World:
    """Procedural connected layout: rooms joined by corridors, landmarks on walls."""
    if spec.extent < 6.0:
        raise WorldGenError(f"extent too small: {spec.extent} < 6.0 m")
    if spec.n_landmarks > len(LANDMARK_KINDS):
        raise WorldGenError(f"at most {len(LANDMARK_KINDS)} landmark kinds")
    for attempt in range(32):
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, attempt]))
        world = _try_generate(spec, rng)
        if world is not None:
            return world
    raise WorldGenError(f"layout generation failed for seed {spec.seed}")


def _try_generate(spec: WorldSpec, rng: np.random.Generator) -> World | None:
    n = int(round(spec.extent / spec.cell))
    grid = np.full((n, n), CODE_WALL, dtype=np.int64)
    centers = []
    for _ in range(spec.n_rooms):
        w = int(rng.integers(n // 4, max(n // 4 + 1, n // 2)))
        h = int(rng.integers(n // 4, max(n // 4 + 1, n // 2)))
        x0 = int(rng.integers(1, max(2, n - w - 1)))
        y0 = int(rng.integers(1, max(2, n - h - 1)))
        grid[x0:x0 + w, y0:y0 + h] = CODE_FREE
        centers.append((x0 + w // 2, y0 + h // 2))
    for (ax, ay), (bx, by) in zip(centers, centers[1:]):
        # L-shaped corridor, 3 cells wide
        lo, hi = sorted((ax, bx))
        grid[lo:hi + 1, max(1, ay - 1):min(n - 1, ay + 2)] = CODE_FREE
        lo, hi = sorted((ay, by))
        grid[max(1, bx - 1):min(n - 1, bx + 2), lo:hi + 1] = CODE_FREE
    grid[0, :] = CODE_WALL
    grid[-1, :] = CODE_WALL
    grid[:, 0] = CODE_WALL
    grid[:, -1] = CODE_WALL
    free = grid == CODE_FREE
    if free.sum() < (n * n) // 8 or not _connected(free):
        return None
    # landmarks: wall cells adjacent to free space, one instance per kind
    candidates = _wall_candidates(grid)
    if len(candidates) < spec.n_landmarks:
        return None
    order = rng.permutation(len(candidates))
    landmarks: dict[str, tuple[int, int]] = {}
    taken: set[tuple[int, int]] = set()
    ki = 0
    for oi in order:
        if ki >= spec.n_landmarks:
            break
        cell = candidates[oi]
        if cell in taken or any(abs(cell[0] - t[0]) + abs(cell[1] - t[1]) < 4 for t in taken):
            continue
        kind = LANDMARK_KINDS[ki]
        grid[cell] = CODE_LANDMARK_BASE + ki
        landmarks[kind] = cell
        taken.add(cell)
        ki += 1
    if ki < spec.n_landmarks:
        return None
    return World(spec, grid, landmarks)


def _connected(free: np.ndarray) -> bool:
    idx = np.argwhere(free)
    if len(idx) == 0:
        return False
    seen = np.zeros_like(free, dtype=bool)
    stack = [tuple(idx[0])]
    seen[tuple(idx[0])] = True
    count = 0
    n = free.shape[0]
    while stack:
        x, y = stack.pop()
        count += 1
        for dx, dy in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            nx, ny = x + dx, y + dy
            if 0 <= nx < n and 0 <= ny < n and free[nx, ny] and not seen[nx, ny]:
                seen[nx, ny] = True
                stack.append((nx, ny))
    return count == len(idx)


def _wall_candidates(grid: np.ndarray) -> list[tuple[int, int]]:
    n = grid.shape[0]
    out = []
    for x in range(n):
        for y in range(n):
            if grid[x, y] != CODE_WALL:
                continue
            for dx, dy in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                nx, ny = x + dx, y + dy
                if 0 <= nx < n and 0 <= ny < n and grid[nx, ny] == CODE_FREE:
                    out.append((x, y))
                    break
    return out


# --- dynamics ----------------------------------------------------------------

def step(world: World, pose: Pose, action: str) -> tuple[Pose, bool, bool]:
    """Apply one action: forward moves block on swept collisions, turns rotate,
    STOP terminates."""
    if action == "STOP":
        return pose, False, True
    if action in TURN_ANGLE:
        return Pose(pose.x, pose.y, (pose.heading + TURN_ANGLE[action]) % 360.0), False, False
    dist = FORWARD_DIST[action]
    rad = math.radians(pose.heading)
    nx = pose.x + dist * math.cos(rad)
    ny = pose.y + dist * math.sin(rad)
    n_samples = max(2, int(math.ceil(dist / (world.spec.cell / 4.0))) + 1)
    for s in np.linspace(0.0, 1.0, n_samples):
        px = pose.x + s * (nx - pose.x)
        py = pose.y + s * (ny - pose.y)
        if not world.is_free(px, py):
            return pose, True, False
    return Pose(nx, ny, pose.heading), False, False


def _line_of_sight(world: World, x0: float, y0: float, x1: float, y1: float) -> bool:
    """True if no non-free cell lies strictly between the two points."""
    target = world.cell_of(x1, y1)
    dist = math.hypot(x1 - x0, y1 - y0)
    step = world.spec.cell * 0.25
    n_steps = int(dist / step)
    for i in range(1, n_steps + 1):
        f = i * step / dist
        sx, sy = x0 + (x1 - x0) * f, y0 + (y1 - y0) * f
        if world.cell_of(sx, sy) == target:
            return True
        if world.code_at(sx, sy) != CODE_FREE:
            return False
    return True


def observe(world: World, pose: Pose, prev_action: int, step_index: int) -> Observation:
    """7x7 egocentric patch rotated to heading; row 0 is furthest in front.

    Cells with no line of sight from the agent read as CODE_OCCLUDED, so
    landmarks behind walls are hidden until the agent actually gets near them.
    """
    patch = np.zeros((PATCH_SIZE, PATCH_SIZE), dtype=np.int64)
    rad = math.radians(pose.heading)
    ch, sh = math.cos(rad), math.sin(rad)
    c = world.spec.cell
    for r in range(PATCH_SIZE):
        f = PATCH_HALF - r          # forward offset in cells
        for col in range(PATCH_SIZE):
            l = col - PATCH_HALF    # rightward offset in cells
            dx = f * ch + l * sh
            dy = f * sh - l * ch
            tx, ty = pose.x + dx * c, pose.y + dy * c
            if _line_of_sight(world, pose.x, pose.y, tx, ty):
                patch[r, col] = world.code_at(tx, ty)
            else:
                patch[r, col] = CODE_OCCLUDED
    return Observation(patch=patch, prev_action=prev_action, step_index=step_index)


# --- planning ----------------------------------------------------------------

_DIRS = ((1, 0), (0, 1), (-1, 0), (0, -1))  # E, N, W, S in grid coords
_DIR_HEADING = {(1, 0): 0.0, (0, 1): 90.0, (-1, 0): 180.0, (0, -1): 270.0}


def shortest_cell_path(world: World, start: tuple[int, int], goal: tuple[int, int]):
    """Deterministic A* over free cells, 4-connected; None if unreachable."""
    if start == goal:
        return [start]
    free = world.free_mask()
    n = world.n
    dist = {start: 0}
    parent = {}
    counter = 0
    h0 = abs(start[0] - goal[0]) + abs(start[1] - goal[1])
    heap = [(h0, 0, counter, start)]
    while heap:
        f, d, _, cell = heapq.heappop(heap)
        if cell == goal:
            path = [cell]
            while cell in parent:
                cell = parent[cell]
                path.append(cell)
            return path[::-1]
        if d > dist.get(cell, 1 << 30):
            continue
        for dx, dy in _DIRS:
            nxt = (cell[0] + dx, cell[1] + dy)
            if not (0 <= nxt[0] < n and 0 <= nxt[1] < n) or not free[nxt]:
                continue
            nd = d + 1
            if nd < dist.get(nxt, 1 << 30):
                dist[nxt] = nd
                parent[nxt] = cell
                counter += 1
                h = abs(nxt[0] - goal[0]) + abs(nxt[1] - goal[1])
                heapq.heappush(heap, (nd + h, nd, counter, nxt))
    return None


def _turn_action_toward(heading: float, desired: float) -> str | None:
    diff = (desired - heading + 180.0) % 360.0 - 180.0
    if abs(diff) < 7.5:
        return None
    mag = min(45.0, abs(diff))
    for a in (45, 30, 15):
        if mag >= a:
            side = "L" if diff > 0 else "R"
            return f"{side}{a}"
    side = "L" if diff > 0 else "R"
    return f"{side}15"


def greedy_expert_action(world: World, pose: Pose, waypoint: tuple[int, int],
                         goal: tuple[float, float], is_final_leg: bool,
                         radius: float) -> str | None:
    """One greedy action along the recomputed shortest path to `waypoint`.

    Returns STOP within the success radius on the final leg and None when the
    waypoint is unreachable.
    """
    if is_final_leg and math.hypot(pose.x - goal[0], pose.y - goal[1]) <= radius:
        return "STOP"
    cell = world.cell_of(pose.x, pose.y)
    if cell == waypoint:
        # mid-leg bookkeeping is the caller's job; stop defensively
        return "STOP" if is_final_leg else None
    path = shortest_cell_path(world, cell, waypoint)
    if path is None or len(path) < 2:
        return None
    d = (path[1][0] - path[0][0], path[1][1] - path[0][1])
    turn = _turn_action_toward(pose.heading, _DIR_HEADING[d])
    if turn is not None:
        return turn
    # straight run length along the path
    run = 1
    while run + 1 < len(path):
        nd = (path[run + 1][0] - path[run][0], path[run + 1][1] - path[run][1])
        if nd != d:
            break
        run += 1
    dist_m = run * world.spec.cell
    for tok, fd in (("F75", 0.75), ("F50", 0.50), ("F25", 0.25)):
        if dist_m >= fd - 1e-9:
            return tok
    return "F25"


def expert_action(world: World, pose: Pose, episode: Episode, step_index: int) -> str:
    """Greedy expert for the leg owning `step_index` (DAgger relabeling)."""
    spans = episode.instruction.clause_step_spans
    t = min(max(step_index, 0), spans[-1][1] - 1)
    leg = 0
    for i, (s, e) in enumerate(spans):
        if s <= t < e:
            leg = i
            break
    # if the pose already sits on this leg's waypoint, advance to the next leg
    cell = world.cell_of(pose.x, pose.y)
    while leg < len(episode.waypoints) - 1 and cell == episode.waypoints[leg]:
        leg += 1
    a = greedy_expert_action(
        world, pose, episode.waypoints[leg], episode.goal,
        is_final_leg=(leg == len(episode.waypoints) - 1),
        radius=world.spec.success_radius,
    )
    if a is None:
        raise WorldGenError(f"expert stuck: unreachable waypoint from {pose} in {episode.episode_id}")
    return a


# --- episode generation ------------------------------------------------------

def _leg_clause(kind: str, first_turn: str | None, final: bool, rng) -> list[str]:
    if final:
        if rng.random() < 0.5:
            return ["THEN", "STOP_AT", "THE", kind, ";"]
        return ["STOP_AT", "THE", kind, ";"]
    if first_turn in ("LEFT", "RIGHT"):
        if rng.random() < 0.5:
            return ["TURN", first_turn, "AND", "GO", "TO", "THE", kind, ";"]
        return ["TURN", first_turn, "THEN", "WALK", "TO", "THE", kind, ";"]
    r = rng.random()
    if r < 0.34:
        return ["GO", "TO", "THE", kind, ";"]
    if r < 0.67:
        return ["WALK", "UNTIL", "YOU", "REACH", "THE", kind, ";"]
    return ["THEN", "GO", "TO", "THE", kind, ";"]


def generate_episode(world: World, episode_seed: int, n_waypoints: tuple[int, int] = (2, 5),
                     max_steps: int = 200) -> Episode:
    """Sample waypoints, roll the greedy expert, and emit the aligned instruction."""
    for attempt in range(32):
        rng = np.random.default_rng(np.random.SeedSequence([world.spec.seed, episode_seed, attempt]))
        ep = _try_episode(world, episode_seed, rng, n_waypoints, max_steps)
        if ep is not None:
            return ep
    raise WorldGenError(f"no route found for world {world.spec.seed}, episode {episode_seed}")


def _adjacent_free_cell(world: World, cell: tuple[int, int]) -> tuple[int, int] | None:
    for dx, dy in _DIRS:
        nxt = (cell[0] + dx, cell[1] + dy)
        if 0 <= nxt[0] < world.n and 0 <= nxt[1] < world.n and world.grid[nxt] == CODE_FREE:
            return nxt
    return None


def _try_episode(world, episode_seed, rng, n_waypoints, max_steps) -> Episode | None:
    spec = world.spec
    kinds = sorted(world.landmarks.keys())
    lo, hi = n_waypoints
    w = int(rng.integers(lo, hi + 1))
    if w > len(kinds):
        return None
    chosen = [kinds[i] for i in rng.choice(len(kinds), size=w, replace=False)]
    waypoint_cells = []
    for kind in chosen:
        adj = _adjacent_free_cell(world, world.landmarks[kind])
        if adj is None:
            return None
        waypoint_cells.append(adj)
    if len(set(waypoint_cells)) != w:
        return None
    free_cells = [tuple(c) for c in np.argwhere(world.free_mask())]
    start_cell = free_cells[int(rng.integers(len(free_cells)))]
    if start_cell in waypoint_cells:
        return None
    goal = world.cell_center(*waypoint_cells[-1])
    # the start must not already lie inside the success radius
    sx, sy = world.cell_center(*start_cell)
    if math.hypot(sx - goal[0], sy - goal[1]) <= spec.success_radius:
        return None
    start = Pose(sx, sy, float(rng.choice([0.0, 90.0, 180.0, 270.0])))

    pose = start
    actions: list[str] = []
    observations: list[Observation] = []
    leg = 0
    leg_starts = [0]
    first_turns: list[str | None] = [None] * w
    travel = 0.0
    prev_action = -1
    while True:
        if len(actions) >= max_steps:
            return None
        cell = world.cell_of(pose.x, pose.y)
        while leg < w - 1 and cell == waypoint_cells[leg]:
            leg += 1
            leg_starts.append(len(actions))
        # a non-final leg must not pass through the goal radius early
        if leg < w - 1 and math.hypot(pose.x - goal[0], pose.y - goal[1]) <= spec.success_radius:
            return None
        a = greedy_expert_action(world, pose, waypoint_cells[leg], goal,
                                 is_final_leg=(leg == w - 1), radius=spec.success_radius)
        if a is None:
            return None
        if a in TURN_ANGLE and first_turns[leg] is None and len(actions) == leg_starts[-1]:
            first_turns[leg] = "LEFT" if a.startswith("L") else "RIGHT"
        observations.append(observe(world, pose, prev_action, len(actions)))
        actions.append(a)
        prev_action = ACTION_INDEX[a]
        pose, collided, terminal = step(world, pose, a)
        if collided:
            return None
        if a in FORWARD_DIST:
            travel += FORWARD_DIST[a]
        if terminal:
            break
    if travel <= 0.0:
        return None
    # every leg needs at least one step
    boundaries = leg_starts + [len(actions)]
    if any(boundaries[i] >= boundaries[i + 1] for i in range(len(boundaries) - 1)):
        return None
    # pad leg_starts if early legs were skipped by waypoint coincidence
    if len(leg_starts) != w:
        return None

    tokens: list[str] = []
    token_spans: list[tuple[int, int]] = []
    step_spans: list[tuple[int, int]] = []
    for i, kind in enumerate(chosen):
        clause = _leg_clause(kind, first_turns[i], final=(i == w - 1), rng=rng)
        token_spans.append((len(tokens), len(tokens) + len(clause)))
        tokens.extend(clause)
        step_spans.append((boundaries[i], boundaries[i + 1]))
    instr = Instruction(tuple(tokens), tuple(token_spans), tuple(step_spans))
    return Episode(
        spec=spec, episode_seed=episode_seed, start=start, goal=goal,
        instruction=instr, actions=tuple(actions), observations=tuple(observations),
        waypoints=tuple(waypoint_cells), shortest_path_length=travel,
    )


# --- serialization -----------------------------------------------------------

FORMAT_VERSION = 1


def episode_to_record(ep: Episode, include_grid: bool = True) -> dict:
    rec = {
        "version": FORMAT_VERSION,
        "spec": ep.spec.to_dict(),
        "episode_seed": ep.episode_seed,
        "start": [ep.start.x, ep.start.y, ep.start.heading],
        "goal": list(ep.goal),
        "tokens": list(ep.instruction.tokens),
        "clause_token_spans": [list(s) for s in ep.instruction.clause_token_spans],
        "clause_step_spans": [list(s) for s in ep.instruction.clause_step_spans],
        "actions": list(ep.actions),
        "observations": [o.to_record() for o in ep.observations],
        "waypoints": [list(wp) for wp in ep.waypoints],
        "shortest_path_length": ep.shortest_path_length,
    }
    return rec


def episode_from_record(rec: dict) -> Episode:
    if rec.get("version") != FORMAT_VERSION:
        raise ValueError(f"unsupported episode record version {rec.get('version')}")
    instr = Instruction(
        tuple(rec["tokens"]),
        tuple(tuple(s) for s in rec["clause_token_spans"]),
        tuple(tuple(s) for s in rec["clause_step_spans"]),
    )
    return Episode(
        spec=WorldSpec.from_dict(rec["spec"]),
        episode_seed=rec["episode_seed"],
        start=Pose(*rec["start"]),
        goal=tuple(rec["goal"]),
        instruction=instr,
        actions=tuple(rec["actions"]),
        observations=tuple(Observation.from_record(o) for o in rec["observations"]),
        waypoints=tuple(tuple(wp) for wp in rec["waypoints"]),
        shortest_path_length=rec["shortest_path_length"],
    )


def write_episodes(path, episodes) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ep in episodes:
            fh.write(canonical_json(episode_to_record(ep)) + "\n")


def read_episodes(path) -> list[Episode]:
    import json

    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(episode_from_record(json.loads(line)))
    return out
