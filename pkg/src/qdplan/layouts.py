"""Built-in maze layouts as ASCII grids.

One character per 1 m cell, top row first. ``#`` is an obstacle cell, ``.`` is
free space and ``S`` marks the start cell (the agent starts at its center,
facing +x).
"""

OPEN = "\n".join(["." * 32] * 15 + ["." * 16 + "S" + "." * 15] + ["." * 32] * 16)

# Small U-shaped trap right in front of the start. The agent begins inside the
# U facing the closed end; the only way out is back through the mouth at x=9.
TRAP2D = """\
................................
................................
................................
................................
................................
................................
................................
................................
................................
................................
................................
................................
................................
................................
.........#####..................
.............#..................
..........S..#..................
.............#..................
.........#####..................
................................
................................
................................
................................
................................
................................
................................
................................
................................
................................
................................
................................
................................"""

# 2D take on the deceptive "hard maze": the farthest region (top-left) is
# close to the start in straight-line distance but only reachable by
# snaking through all four bands.
HARDMAZE2D = """\
............#...........................
............#...........................
............#...........................
............#...........................
............#.................#.........
............#.................#.........
..............................#.........
..............................#.........
..............................#.........
################################........
........................................
........................................
........................................
........................#...............
........................#...............
........................#...............
........................#...............
........................#...............
........................#...............
........################################
................#.......................
................#.......................
................#.......................
................#.......................
................#.......................
................#.......................
........................................
........................................
........................................
################################........
............................#...........
............................#...........
............................#...........
....................#.......#...........
....................#.......#...........
....................#.......#...........
....................#.......#...........
..S.................#...................
....................#...................
....................#..................."""

LAYOUTS = {
    "open": OPEN,
    "trap2d": TRAP2D,
    "hardmaze2d": HARDMAZE2D,
}

# Archive resolution and evaluation episode length used with each layout.
LAYOUT_DEFAULTS = {
    "open": {"resolution": (32, 32), "episode_len": 3000},
    "trap2d": {"resolution": (32, 32), "episode_len": 250},
    "hardmaze2d": {"resolution": (40, 40), "episode_len": 3000},
}
