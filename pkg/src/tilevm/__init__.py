"""Tile-level bytecode compiler, operator fuser, and accelerator VM."""

from .isa import (
    BytecodeProgram,
    CmpType,
    DType,
    InstructionKind,
    KernelType,
    ProgramHeader,
    Queue,
    TileOrder,
    VirtualInstruction,
    decode_instruction,
    decode_program,
    disassemble,
    encode_instruction,
    encode_program,
)
from .graph import (
    BasicOp,
    OperatorGraph,
    SymbolTable,
    TensorMeta,
    decompose,
    dominant_shape,
    peak_live_count,
)
from .tiler import (
    DeviceConfig,
    InfeasibleTilingError,
    TiledGraph,
    hardware_align_div,
    tile_cube_vector,
    tile_matmul,
    tile_vector_graph,
    tiling_cost,
)
from .encoder import (
    LocalAllocation,
    allocate_local,
    bind_and_run,
    compile_group,
    run_groups,
    tile_for_group,
    validate_sync,
)
from .device import (
    DeviceState,
    ExecutionStats,
    dispatch,
    dispatch_stacked,
    exec_instruction,
    run_core,
    simulate_timing,
)
from .fuser import (
    FusedGroup,
    FusionBuffer,
    StackingPlan,
    can_merge_iteration,
    fuse_static,
    plan_stacking,
)
from .oracle import RefTensor, compare, ref_execute

__version__ = "0.1.0"
