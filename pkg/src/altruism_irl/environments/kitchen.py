"""Two-chef gridworld kitchen.

Layout files are ASCII grids::

    #  wall            .  floor           S  shared start cell (floor)
    T  tomato stand    P  plate stand     O  pot
    B  table           D  delivery

Players have no orientation.  ``interact`` checks the neighbouring tiles in the
order up, down, left, right and applies the first valid effect.  Moves are
simultaneous; a move fails if it leaves the walkable region, if both players
target the same cell, if they try to swap cells, or if the target is occupied
by a player that does not leave it.  Both players only share a cell at the
start.

Shared-object conflicts (both players acting on the pot or on the same table
slot in the same step) cancel both interactions, with one exception: two
tomatoes dropped into an empty pot together fill it once and empty both
hands.  This keeps cooking and delivering events a function of a player's own
state and action.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass
from typing import Dict, List, Tuple

import numpy as np
import scipy.sparse as sp

from ..game import RewardlessGame

FLOOR, WALL, TOMATO, PLATE, POT, TABLE, DELIVERY = "floor wall tomato_stand plate_stand pot table delivery".split()
TILE_CHARS = {".": FLOOR, "S": FLOOR, "#": WALL, "T": TOMATO, "P": PLATE, "O": POT, "B": TABLE, "D": DELIVERY}

NOTHING, HOLD_PLATE, HOLD_TOMATO, HOLD_SOUP = range(4)
CARRY_NAMES = ("nothing", "plate", "tomato", "soup")
POT_EMPTY, POT_READY = 0, 1
SLOT_EMPTY, SLOT_TOMATO, SLOT_PLATE = 0, 1, 2

UP, DOWN, LEFT, RIGHT, INTERACT = range(5)
ACTION_NAMES = ("up", "down", "left", "right", "interact")
MOVES = {UP: (-1, 0), DOWN: (1, 0), LEFT: (0, -1), RIGHT: (0, 1)}
NEIGHBOUR_ORDER = (UP, DOWN, LEFT, RIGHT)

REFERENCE_LAYOUT = """\
#T#O#
#.B.D
#.S.#
#P###
"""

COMPACT_LAYOUT = """\
#TO#
#.SD
#..#
#P##
"""


@dataclass
class KitchenLayout:
    grid: List[List[str]]
    start_cell: Tuple[int, int]

    def __post_init__(self):
        kinds = [k for row in self.grid for k in row]
        if kinds.count(POT) != 1:
            raise ValueError("layout needs exactly one pot")
        for kind in (TOMATO, PLATE, DELIVERY):
            if kind not in kinds:
                raise ValueError(f"layout has no {kind}")
        if self.kind(self.start_cell) != FLOOR:
            raise ValueError("start cell must be floor")
        cells = self.walkable()
        seen = {self.start_cell}
        frontier = [self.start_cell]
        while frontier:
            cell = frontier.pop()
            for m in MOVES.values():
                nxt = (cell[0] + m[0], cell[1] + m[1])
                if nxt in cells and nxt not in seen:
                    seen.add(nxt)
                    frontier.append(nxt)
        if len(seen) != len(cells):
            raise ValueError("walkable region is not connected")

    @property
    def shape(self):
        return len(self.grid), max(len(r) for r in self.grid)

    def kind(self, cell) -> str:
        r, c = cell
        if 0 <= r < len(self.grid) and 0 <= c < len(self.grid[r]):
            return self.grid[r][c]
        return WALL

    def walkable(self) -> List[Tuple[int, int]]:
        return [
            (r, c) for r, row in enumerate(self.grid) for c, k in enumerate(row) if k == FLOOR
        ]

    def tables(self) -> List[Tuple[int, int]]:
        return [(r, c) for r, row in enumerate(self.grid) for c, k in enumerate(row) if k == TABLE]


def parse_layout(text: str) -> KitchenLayout:
    rows = [line.rstrip("\n") for line in text.strip("\n").splitlines()]
    grid, start = [], None
    for r, line in enumerate(rows):
        row = []
        for c, ch in enumerate(line):
            if ch not in TILE_CHARS:
                raise ValueError(f"unknown tile {ch!r} at ({r}, {c})")
            if ch == "S":
                if start is not None:
                    raise ValueError("layout has more than one start cell")
                start = (r, c)
            row.append(TILE_CHARS[ch])
        grid.append(row)
    if start is None:
        raise ValueError("layout has no start cell")
    return KitchenLayout(grid, start)


# state tuple: (pos0, pos1, carry0, carry1, pot, slot_0, ..., slot_k)


@dataclass
class KitchenCodec:
    layout: KitchenLayout
    states: List[tuple]
    index: Dict[tuple, int]
    next_state: np.ndarray  # (S, 25)
    cook: np.ndarray  # (2, S, 5): player i's interact fills the pot
    deliver: np.ndarray  # (2, S, 5): player i's interact delivers a soup
    swap: np.ndarray  # (S,) index of the player-swapped state

    @property
    def num_states(self) -> int:
        return len(self.states)

    def encode(self, state: tuple) -> int:
        return self.index[state]

    def decode(self, idx: int) -> tuple:
        return self.states[idx]

    def cooked(self, s: int, joint: Tuple[int, int], i: int) -> bool:
        return bool(self.cook[i, s, joint[i]])

    def delivered(self, s: int, joint: Tuple[int, int], i: int) -> bool:
        return bool(self.deliver[i, s, joint[i]])

    def describe(self, idx: int) -> dict:
        p0, p1, c0, c1, pot, *slots = self.states[idx]
        return {
            "index": idx,
            "positions": [list(p0), list(p1)],
            "carry": [CARRY_NAMES[c0], CARRY_NAMES[c1]],
            "pot": "ready" if pot == POT_READY else "empty",
            "table": [("empty", "tomato", "plate")[x] for x in slots],
        }

    def manifest(self) -> dict:
        return {
            "num_states": self.num_states,
            "start_cell": list(self.layout.start_cell),
            "states": [self.describe(i) for i in range(self.num_states)],
        }

    def dump_manifest(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.manifest(), fh)


def _interaction(layout, tables, state, player):
    """Effect of ``player`` interacting in ``state``: (target, new_carry, kind) or None."""
    pos = state[player]
    carry = state[2 + player]
    pot = state[4]
    for direction in NEIGHBOUR_ORDER:
        dr, dc = MOVES[direction]
        cell = (pos[0] + dr, pos[1] + dc)
        kind = layout.kind(cell)
        if kind == TOMATO and carry == NOTHING:
            return None, HOLD_TOMATO, "take"
        if kind == PLATE and carry == NOTHING:
            return None, HOLD_PLATE, "take"
        if kind == POT and pot == POT_EMPTY and carry == HOLD_TOMATO:
            return "pot", NOTHING, "cook"
        if kind == POT and pot == POT_READY and carry == HOLD_PLATE:
            return "pot", HOLD_SOUP, "serve"
        if kind == DELIVERY and carry == HOLD_SOUP:
            return None, NOTHING, "deliver"
        if kind == TABLE:
            k = tables.index(cell)
            slot = state[5 + k]
            if slot == SLOT_EMPTY and carry in (HOLD_TOMATO, HOLD_PLATE):
                return ("table", k), NOTHING, "place"
            if slot != SLOT_EMPTY and carry == NOTHING:
                new = HOLD_TOMATO if slot == SLOT_TOMATO else HOLD_PLATE
                return ("table", k), new, "pick"
    return None


def kitchen_step(layout, tables, state, joint):
    """Deterministic successor of ``state`` and the (cook, deliver) flags per player."""
    pos = [state[0], state[1]]
    carry = [state[2], state[3]]
    pot = state[4]
    slots = list(state[5:])
    effects = [None, None]
    for i in (0, 1):
        if joint[i] == INTERACT:
            effects[i] = _interaction(layout, tables, state, i)
    cook_flags = [bool(e and e[2] == "cook") for e in effects]
    deliver_flags = [bool(e and e[2] == "deliver") for e in effects]
    both_cook = all(cook_flags)
    if (
        effects[0] and effects[1] and effects[0][0] is not None
        and effects[0][0] == effects[1][0] and not both_cook
    ):
        effects = [None, None]
    for i in (0, 1):
        e = effects[i]
        if e is None:
            continue
        target, new_carry, kind = e
        carry[i] = new_carry
        if kind == "cook":
            pot = POT_READY
        elif kind == "serve":
            pot = POT_EMPTY
        elif kind == "place":
            slots[target[1]] = SLOT_TOMATO if state[2 + i] == HOLD_TOMATO else SLOT_PLATE
        elif kind == "pick":
            slots[target[1]] = SLOT_EMPTY

    walk = set(layout.walkable())
    targets = []
    for i in (0, 1):
        if joint[i] in MOVES:
            dr, dc = MOVES[joint[i]]
            cell = (pos[i][0] + dr, pos[i][1] + dc)
            targets.append(cell if cell in walk else pos[i])
        else:
            targets.append(pos[i])
    moving = [targets[i] != pos[i] for i in (0, 1)]
    if targets[0] == targets[1] and (moving[0] or moving[1]):
        targets = list(pos)
    elif pos[0] != pos[1] and targets[0] == pos[1] and targets[1] == pos[0]:
        targets = list(pos)
    nxt = (targets[0], targets[1], carry[0], carry[1], pot, *slots)
    return nxt, cook_flags, deliver_flags


def swap_players(state: tuple) -> tuple:
    p0, p1, c0, c1, *rest = state
    return (p1, p0, c1, c0, *rest)


def build_kitchen(layout: KitchenLayout, discount: float = 0.9, dense: bool = False):
    """Enumerate reachable states and build the two-player game plus its codec."""
    tables = layout.tables()
    start = layout.start_cell
    init = (start, start, NOTHING, NOTHING, POT_EMPTY) + (SLOT_EMPTY,) * len(tables)
    joints = [(a, b) for a in range(5) for b in range(5)]
    seen = {init}
    queue = deque([init])
    succ = {}
    while queue:
        state = queue.popleft()
        out = []
        for joint in joints:
            nxt, cf, df = kitchen_step(layout, tables, state, joint)
            out.append((nxt, cf, df))
            if nxt not in seen:
                seen.add(nxt)
                queue.append(nxt)
        succ[state] = out
    states = sorted(seen)
    index = {s: i for i, s in enumerate(states)}
    S = len(states)
    next_state = np.empty((S, 25), dtype=np.int64)
    cook = np.zeros((2, S, 5), dtype=bool)
    deliver = np.zeros((2, S, 5), dtype=bool)
    for s, state in enumerate(states):
        for j, (nxt, cf, df) in enumerate(succ[state]):
            next_state[s, j] = index[nxt]
            for i in (0, 1):
                a = joints[j][i]
                cook[i, s, a] |= cf[i]
                deliver[i, s, a] |= df[i]
    missing = [s for s in states if swap_players(s) not in index]
    if missing:
        raise ValueError("layout produced states whose player swap is unreachable")
    swap = np.array([index[swap_players(s)] for s in states], dtype=np.int64)
    rows = np.arange(S * 25)
    T = sp.csr_matrix((np.ones(S * 25), (rows, next_state.ravel())), shape=(S * 25, S))
    if dense:
        T = T.toarray().reshape(S, 25, S)
    init_dist = np.zeros(S)
    init_dist[index[init]] = 1.0
    game = RewardlessGame(S, 5, 2, T, discount, init_dist, seat_views=np.stack([np.arange(S), swap]))
    codec = KitchenCodec(layout, states, index, next_state, cook, deliver, swap)
    return game, codec


def chef_intrinsic_reward(codec: KitchenCodec, kind: str) -> np.ndarray:
    """Intrinsic reward table (S, 5) in the frame of the chef occupying seat 0."""
    if kind == "deliver":
        mask = codec.deliver[0]
    elif kind == "cook":
        mask = codec.cook[0]
    elif kind == "both":
        mask = codec.deliver[0] | codec.cook[0]
    else:
        raise ValueError(f"unknown chef kind {kind!r}")
    return mask.astype(float)
