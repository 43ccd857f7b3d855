"""
Home to procedural terrain: heightfields, the terrain families, goal sampling
and the difficulty curriculum.

A HeightField stores node heights on a regular grid (index i along x, j along
y) together with a per-node validity code. Tiles are generated per curriculum
cell and assembled into a single world field that every robot shares.
"""
import logging
import math
from dataclasses import dataclass
from enum import Enum, IntEnum
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from legnav.config import TerrainConfig
from legnav.csvlog import CsvLog
from legnav.errors import ConfigError, SamplingExhaustedError
from legnav.values import HOLE, HOLE_TOKEN

log = logging.getLogger(__name__)


class Family(str, Enum):
    STAIRS = "stairs"
    SLOPE = "slope"
    RANDOM_STEPS = "random_steps"
    OBSTACLES = "obstacles"
    GAP = "gap"
    PIT = "pit"
    FLAT = "flat"


class Cell(IntEnum):
    VALID = 0
    HOLE = 1
    HIGH_OBSTACLE = 2


# Curriculum floor per family (m, except slope in degrees).
PARAM_MIN: Dict[Family, float] = {
    Family.STAIRS: 0.05,
    Family.SLOPE: 5.0,
    Family.RANDOM_STEPS: 0.025,
    Family.OBSTACLES: 0.1,
    Family.GAP: 0.1,
    Family.PIT: 0.1,
    Family.FLAT: 0.0,
}

# Hardest difficulty per family, the values reported as solved by the
# final-position policy.
PARAM_MAX: Dict[Family, float] = {
    Family.STAIRS: 0.4,
    Family.SLOPE: 48.0,
    Family.RANDOM_STEPS: 0.2,
    Family.OBSTACLES: 0.85,
    Family.GAP: 1.2,
    Family.PIT: 0.95,
    Family.FLAT: 0.0,
}


@dataclass(frozen=True)
class TerrainSpec:
    """
    One terrain family at one curriculum level.
    """

    family: Family
    level: int
    max_level: int
    param_min: float
    param_max: float

    def __post_init__(self) -> None:
        if self.max_level < 0 or not 0 <= self.level <= self.max_level:
            raise ConfigError(
                "terrain.level", f"{self.level} not in [0, {self.max_level}]"
            )

    @property
    def difficulty_param(self) -> float:
        if self.level == self.max_level:
            return self.param_max
        return self.param_min + (self.level / self.max_level) * (
            self.param_max - self.param_min
        )

    @classmethod
    def from_config(
        cls, family: Union[Family, str], level: int, config: TerrainConfig
    ) -> "TerrainSpec":
        family = Family(family)
        return cls(
            family=family,
            level=level,
            max_level=config.max_level,
            param_min=config.param_min.get(family.value, PARAM_MIN[family]),
            param_max=config.param_max.get(family.value, PARAM_MAX[family]),
        )


@dataclass
class HeightField:
    """
    Regular-grid terrain. heights[i, j] is the height of the node at
    origin + (i, j) * resolution; validity[i, j] holds a Cell code.
    """

    origin: Tuple[float, float]
    resolution: float
    heights: np.ndarray
    validity: np.ndarray

    def __post_init__(self) -> None:
        if not self.resolution > 0:
            raise ConfigError("terrain.resolution", "must be > 0")
        self.heights = np.asarray(self.heights, dtype=np.float64)
        self.validity = np.asarray(self.validity, dtype=np.uint8)
        if self.heights.ndim != 2 or min(self.heights.shape) < 2:
            raise ConfigError(
                "terrain.size", f"degenerate heightfield shape {self.heights.shape}"
            )
        if self.validity.shape != self.heights.shape:
            raise ConfigError("terrain.size", "validity and heights shapes differ")
        if not np.all(np.isfinite(self.heights)):
            raise ConfigError("terrain.heights", "heights must be finite")
        self.origin = (float(self.origin[0]), float(self.origin[1]))

    @property
    def shape(self) -> Tuple[int, int]:
        return self.heights.shape

    @property
    def extent(self) -> Tuple[float, float]:
        return (
            (self.shape[0] - 1) * self.resolution,
            (self.shape[1] - 1) * self.resolution,
        )

    def node_coords(self) -> Tuple[np.ndarray, np.ndarray]:
        """
        Returns the x and y coordinates of the grid nodes.
        """
        nx, ny = self.shape
        return (
            self.origin[0] + np.arange(nx) * self.resolution,
            self.origin[1] + np.arange(ny) * self.resolution,
        )

    def _locate(self, x, y):
        nx, ny = self.shape
        fx = np.clip((np.asarray(x, dtype=np.float64) - self.origin[0]) / self.resolution, 0, nx - 1)
        fy = np.clip((np.asarray(y, dtype=np.float64) - self.origin[1]) / self.resolution, 0, ny - 1)
        i = np.minimum(np.floor(fx).astype(np.int64), nx - 2)
        j = np.minimum(np.floor(fy).astype(np.int64), ny - 2)
        return i, j, fx - i, fy - j

    def surface(self, x, y) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """
        Returns (height, dh/dx, dh/dy, hole) at the query points.

        Heights are bilinear over the surrounding four nodes; if any of them is
        a hole the point is a hole, its height is HOLE and its slope zero.
        Queries outside the field are clamped to the border.
        """
        i, j, tx, ty = self._locate(x, y)
        h = self.heights
        h00, h10 = h[i, j], h[i + 1, j]
        h01, h11 = h[i, j + 1], h[i + 1, j + 1]
        v = self.validity
        hole = (
            (v[i, j] == Cell.HOLE)
            | (v[i + 1, j] == Cell.HOLE)
            | (v[i, j + 1] == Cell.HOLE)
            | (v[i + 1, j + 1] == Cell.HOLE)
        )
        height = (h00 * (1 - tx) + h10 * tx) * (1 - ty) + (h01 * (1 - tx) + h11 * tx) * ty
        grad_x = ((h10 - h00) * (1 - ty) + (h11 - h01) * ty) / self.resolution
        grad_y = ((h01 - h00) * (1 - tx) + (h11 - h10) * tx) / self.resolution
        height = np.where(hole, HOLE, height)
        grad_x = np.where(hole, 0.0, grad_x)
        grad_y = np.where(hole, 0.0, grad_y)
        return height, grad_x, grad_y, hole

    def height_at(self, x, y):
        """
        Returns the interpolated height at (x, y), or HOLE (nan) over a hole.
        """
        height = self.surface(x, y)[0]
        return float(height) if np.ndim(height) == 0 else height

    def is_hole(self, x, y):
        return self.surface(x, y)[3]

    def footprint_valid(self, x: float, y: float, half_size: float) -> bool:
        """
        True if every node within the square footprint around (x, y) is VALID
        and the footprint lies inside the field.
        """
        (x0, y0), (ex, ey) = self.origin, self.extent
        if x - half_size < x0 or y - half_size < y0:
            return False
        if x + half_size > x0 + ex or y + half_size > y0 + ey:
            return False
        i_lo = int(math.floor((x - half_size - x0) / self.resolution))
        i_hi = int(math.ceil((x + half_size - x0) / self.resolution))
        j_lo = int(math.floor((y - half_size - y0) / self.resolution))
        j_hi = int(math.ceil((y + half_size - y0) / self.resolution))
        block = self.validity[i_lo : i_hi + 1, j_lo : j_hi + 1]
        return bool(np.all(block == Cell.VALID))


@dataclass
class CurriculumGrid:
    """
    Per-robot assignment to a (level, column) terrain cell. Column c holds
    family families[c].
    """

    num_levels: int
    families: List[Family]
    levels: np.ndarray
    cols: np.ndarray

    @property
    def max_level(self) -> int:
        return self.num_levels - 1

    @property
    def num_cols(self) -> int:
        return len(self.families)

    @classmethod
    def initial(
        cls,
        config: TerrainConfig,
        num_robots: int,
        rng: np.random.Generator,
        families: Optional[Sequence[Family]] = None,
    ) -> "CurriculumGrid":
        """
        Spreads robots evenly over the columns with random starting levels in
        [0, max_init_level].
        """
        families = list(families) if families is not None else column_families(config)
        cols = np.arange(num_robots) % len(families)
        levels = rng.integers(0, config.max_init_level + 1, size=num_robots)
        return cls(
            num_levels=config.num_levels,
            families=families,
            levels=levels.astype(np.int64),
            cols=cols.astype(np.int64),
        )

    def variants_of(self, col: int) -> np.ndarray:
        return np.flatnonzero(
            np.array([f is self.families[col] for f in self.families])
        )

    def snapshot(self) -> Dict[str, np.ndarray]:
        return {"levels": self.levels.copy(), "cols": self.cols.copy()}

    def restore(self, snapshot: Dict[str, np.ndarray]) -> None:
        levels = np.asarray(snapshot["levels"], dtype=np.int64)
        cols = np.asarray(snapshot["cols"], dtype=np.int64)
        if levels.min(initial=0) < 0 or levels.max(initial=0) > self.max_level:
            raise ValueError("curriculum snapshot levels out of range")
        if cols.min(initial=0) < 0 or cols.max(initial=0) >= self.num_cols:
            raise ValueError("curriculum snapshot columns out of range")
        self.levels, self.cols = levels, cols


def column_families(config: TerrainConfig) -> List[Family]:
    """
    Returns the family of every curriculum column, variants adjacent.
    """
    return [
        Family(name) for name in config.families for _ in range(config.variants_per_family)
    ]


def update_curriculum(
    grid: CurriculumGrid,
    robot: int,
    success: bool,
    progress_fraction: float,
    rng: np.random.Generator,
) -> Tuple[int, int]:
    """
    Promotes a robot one level on success and demotes it one level when it
    covered less than half of the way to its target.

    A success at the top level keeps the robot there on a randomly chosen
    variant column of the same family. Returns the new (level, col).
    """
    level, col = int(grid.levels[robot]), int(grid.cols[robot])
    if success:
        if level >= grid.max_level:
            level = grid.max_level
            variants = grid.variants_of(col)
            col = int(variants[rng.integers(len(variants))])
        else:
            level += 1
    elif progress_fraction < 0.5:
        level = max(0, level - 1)

    grid.levels[robot], grid.cols[robot] = level, col
    log.debug(f"curriculum robot {robot} -> level {level}, col {col}")
    return level, col


def tile_spawn(config: TerrainConfig, protocol: bool = False) -> Tuple[float, float]:
    """
    Returns the spawn point of a tile relative to its origin.
    """
    if protocol:
        return config.protocol_spawn_x, config.protocol_tile_width / 2
    return config.tile_length / 2, config.tile_width / 2


def generate(
    spec: TerrainSpec,
    rng_seed: int,
    config: Optional[TerrainConfig] = None,
    protocol: bool = False,
) -> HeightField:
    """
    Generates one terrain tile with its origin at (0, 0).

    Deterministic per (spec, rng_seed, config). Protocol tiles use the longer
    protocol footprint and spawn point.
    """
    config = config or TerrainConfig()
    if protocol:
        length, width = config.protocol_tile_length, config.protocol_tile_width
    else:
        length, width = config.tile_length, config.tile_width

    res = config.resolution
    if not res > 0:
        raise ConfigError("terrain.resolution", "must be > 0")
    nx, ny = int(round(length / res)) + 1, int(round(width / res)) + 1
    if nx < 2 or ny < 2:
        raise ConfigError("terrain.tile_length", "tile smaller than one cell")

    heights = np.zeros((nx, ny))
    validity = np.full((nx, ny), Cell.VALID, dtype=np.uint8)
    xs = np.arange(nx) * res
    ys = np.arange(ny) * res
    spawn = tile_spawn(config, protocol)
    rng = np.random.default_rng(rng_seed)
    param = spec.difficulty_param

    _FAMILY_BUILDERS[spec.family](heights, validity, xs, ys, spawn, param, config, rng)

    holes = validity == Cell.HOLE
    heights[holes] = -config.hole_fill_depth
    log.debug(
        f"generated {spec.family.value} level {spec.level} "
        f"param {param:.4g} seed {rng_seed}: {int(holes.sum())} hole nodes"
    )
    return HeightField(origin=(0.0, 0.0), resolution=res, heights=heights, validity=validity)


def _stairs(heights, validity, xs, ys, spawn, param, config, rng) -> None:
    steps_per_run = max(1, int(round(config.stairs_run / (xs[1] - xs[0]))))
    i = np.arange(len(xs))
    heights[:, :] = (param * (i // steps_per_run))[:, None]


def _slope(heights, validity, xs, ys, spawn, param, config, rng) -> None:
    heights[:, :] = (math.tan(math.radians(param)) * xs)[:, None]


def _random_steps(heights, validity, xs, ys, spawn, param, config, rng) -> None:
    res = xs[1] - xs[0]
    per_block = max(1, int(round(config.step_block / res)))
    bx = -(-len(xs) // per_block)
    by = -(-len(ys) // per_block)
    blocks = rng.uniform(-param, param, size=(bx, by))
    heights[:, :] = np.repeat(np.repeat(blocks, per_block, axis=0), per_block, axis=1)[
        : len(xs), : len(ys)
    ]
    _flatten_platform(heights, xs, ys, spawn, config.platform_size)


def _obstacles(heights, validity, xs, ys, spawn, param, config, rng) -> None:
    clear = config.platform_size / 2 + param / 2
    placed = 0
    attempts = 0
    while placed < config.obstacle_count and attempts < 100 * max(1, config.obstacle_count):
        attempts += 1
        cx = rng.uniform(xs[0] + param / 2, xs[-1] - param / 2)
        cy = rng.uniform(ys[0] + param / 2, ys[-1] - param / 2)
        if abs(cx - spawn[0]) < clear and abs(cy - spawn[1]) < clear:
            continue
        mx = np.abs(xs - cx) <= param / 2
        my = np.abs(ys - cy) <= param / 2
        box = mx[:, None] & my[None, :]
        heights[box] = config.obstacle_height
        validity[box] = Cell.HIGH_OBSTACLE
        placed += 1


def _gap(heights, validity, xs, ys, spawn, param, config, rng) -> None:
    res = xs[1] - xs[0]
    start = int(round((spawn[0] + config.gap_offset) / res))
    # k hole nodes leave (k + 1) * res unsupported, since a point is a hole
    # when any of its four surrounding nodes is
    nodes = max(1, int(round(param / res)) - 1)
    validity[start : start + nodes, :] = Cell.HOLE


def _pit(heights, validity, xs, ys, spawn, param, config, rng) -> None:
    half = config.pit_size / 2
    inside = (np.abs(xs - spawn[0]) <= half)[:, None] & (np.abs(ys - spawn[1]) <= half)[None, :]
    heights[inside] = -param


def _flat(heights, validity, xs, ys, spawn, param, config, rng) -> None:
    pass


def _flatten_platform(heights, xs, ys, spawn, size) -> None:
    mx = np.abs(xs - spawn[0]) <= size / 2
    my = np.abs(ys - spawn[1]) <= size / 2
    heights[mx[:, None] & my[None, :]] = 0.0


_FAMILY_BUILDERS: Dict[Family, Callable] = {
    Family.STAIRS: _stairs,
    Family.SLOPE: _slope,
    Family.RANDOM_STEPS: _random_steps,
    Family.OBSTACLES: _obstacles,
    Family.GAP: _gap,
    Family.PIT: _pit,
    Family.FLAT: _flat,
}


def tile_seed(seed: int, level: int, col: int) -> int:
    """
    Derives the generation seed of one curriculum tile.
    """
    return int(np.random.SeedSequence([seed, level, col]).generate_state(1)[0])


@dataclass
class TerrainWorld:
    """
    All curriculum tiles assembled into one heightfield with a flat border.

    Tile (level, col) covers x in [level, level + 1) * tile_length and
    y in [col, col + 1) * tile_width, in world coordinates.
    """

    field: HeightField
    specs: List[List[TerrainSpec]]
    tile_size: Tuple[float, float]
    spawns: np.ndarray
    floors: np.ndarray

    @property
    def num_levels(self) -> int:
        return len(self.specs)

    @property
    def num_cols(self) -> int:
        return len(self.specs[0])

    def spawn_points(self, levels: np.ndarray, cols: np.ndarray) -> np.ndarray:
        """
        Returns world spawn points (x, y, ground z) of the given cells.
        """
        return self.spawns[levels, cols]

    def kill_heights(self, levels: np.ndarray, cols: np.ndarray, margin: float) -> np.ndarray:
        return self.floors[levels, cols] - margin

    @classmethod
    def build(
        cls,
        config: TerrainConfig,
        seed: int,
        families: Optional[Sequence[Family]] = None,
        protocol: bool = False,
        generator: Callable[..., HeightField] = generate,
    ) -> "TerrainWorld":
        """
        Generates every (level, column) tile and assembles the world.

        generator may be a memoized wrapper of generate.
        """
        families = list(families) if families is not None else column_families(config)
        specs = [
            [TerrainSpec.from_config(f, level, config) for f in families]
            for level in range(config.num_levels)
        ]
        tiles = [
            [
                generator(spec, tile_seed(seed, level, col), config, protocol)
                for col, spec in enumerate(row)
            ]
            for level, row in enumerate(specs)
        ]
        if protocol:
            size = (config.protocol_tile_length, config.protocol_tile_width)
        else:
            size = (config.tile_length, config.tile_width)
        return cls._assemble(tiles, specs, size, config, tile_spawn(config, protocol))

    @classmethod
    def _assemble(cls, tiles, specs, size, config, spawn) -> "TerrainWorld":
        res = config.resolution
        levels, cols = len(tiles), len(tiles[0])
        border_nodes = int(round(config.border / res))
        tile_nx, tile_ny = tiles[0][0].shape
        step_x, step_y = tile_nx - 1, tile_ny - 1
        nx = levels * step_x + 1 + 2 * border_nodes
        ny = cols * step_y + 1 + 2 * border_nodes

        heights = np.zeros((nx, ny))
        validity = np.full((nx, ny), Cell.VALID, dtype=np.uint8)
        spawns = np.zeros((levels, cols, 3))
        floors = np.zeros((levels, cols))

        for level in range(levels):
            for col in range(cols):
                tile = tiles[level][col]
                i0 = border_nodes + level * step_x
                j0 = border_nodes + col * step_y
                heights[i0 : i0 + tile_nx, j0 : j0 + tile_ny] = tile.heights
                validity[i0 : i0 + tile_nx, j0 : j0 + tile_ny] = tile.validity
                solid = tile.validity != Cell.HOLE
                floors[level, col] = tile.heights[solid].min() if solid.any() else 0.0

        origin = (-border_nodes * res, -border_nodes * res)
        field = HeightField(origin=origin, resolution=res, heights=heights, validity=validity)
        for level in range(levels):
            for col in range(cols):
                x = level * step_x * res + spawn[0]
                y = col * step_y * res + spawn[1]
                spawns[level, col] = (x, y, field.height_at(x, y))

        log.info(
            f"terrain world: {levels} levels x {cols} columns, "
            f"{nx}x{ny} nodes at {res} m"
        )
        return cls(field=field, specs=specs, tile_size=size, spawns=spawns, floors=floors)

    @classmethod
    def flat(cls, length: float, width: float, config: TerrainConfig, spawn_x: float) -> "TerrainWorld":
        """
        A single flat tile of the given size, used for long straight runs.
        """
        res = config.resolution
        nx, ny = int(round(length / res)) + 1, int(round(width / res)) + 1
        tile = HeightField(
            origin=(0.0, 0.0),
            resolution=res,
            heights=np.zeros((nx, ny)),
            validity=np.zeros((nx, ny), dtype=np.uint8),
        )
        spec = TerrainSpec(Family.FLAT, 0, 0, 0.0, 0.0)
        return cls._assemble([[tile]], [[spec]], (length, width), config, (spawn_x, width / 2))


def sample_target(
    field: HeightField,
    origin: np.ndarray,
    rng: np.random.Generator,
    config: Optional[TerrainConfig] = None,
    cell: Optional[Tuple[int, int]] = None,
) -> np.ndarray:
    """
    Samples a target uniformly in polar coordinates around origin.

    The radius is uniform in target_radius and the angle uniform in [0, 2pi).
    Targets whose footprint overlaps a hole, a high obstacle or the field edge
    are resampled. The target sits target_height above the ground.
    """
    config = config or TerrainConfig()
    r_min, r_max = config.target_radius
    half = config.target_footprint / 2
    for _ in range(config.max_target_attempts):
        radius = rng.uniform(r_min, r_max)
        angle = rng.uniform(0.0, 2 * math.pi)
        x = origin[0] + radius * math.cos(angle)
        y = origin[1] + radius * math.sin(angle)
        if not field.footprint_valid(x, y, half):
            continue
        ground = field.height_at(x, y)
        if math.isnan(ground):
            continue
        return np.array([x, y, ground + config.target_height])

    where = cell if cell is not None else (float(origin[0]), float(origin[1]))
    log.error(f"target sampling exhausted at {where}")
    raise SamplingExhaustedError(where, config.max_target_attempts)


def export_csv(field: HeightField, path: Union[str, Path], seed: Optional[int] = None) -> Path:
    """
    Writes the node heights row-major (one row per x index), holes as the
    literal token 'hole'.
    """
    xs, ys = field.node_coords()
    columns = ["x"] + [f"y={y!r}" for y in ys.tolist()]
    with CsvLog(path, columns, seed=seed) as out:
        for i, x in enumerate(xs.tolist()):
            row = [
                HOLE_TOKEN if field.validity[i, j] == Cell.HOLE else float(field.heights[i, j])
                for j in range(field.shape[1])
            ]
            out.write([x] + row)
    return Path(path)
