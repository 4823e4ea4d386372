"""opblend: train small image-smoothing operators and generate a continuum
of new operators, without retraining, by blending trained weights."""

from .autodiff import (
    GradTape,
    ShapeError,
    Tensor,
    absval,
    activation,
    add,
    affine,
    concat_channels,
    conv2d,
    conv_transpose2d,
    elementwise,
    lrelu,
    mean_all,
    mul,
    reciprocal,
    sigmoid,
    sum_all,
    tanh,
)
from .blocks import (
    ConvParams,
    DsaParams,
    DsanConfig,
    DsanModel,
    MsacBlock,
    PcanBlock,
    ResDsaBlock,
    bind_dsan,
    dsa_forward,
    dsa_terms,
    dsan_forward,
    dsan_param_layout,
    infer_dsan_config,
    init_dsan_params,
    msac_forward,
    pcan_forward,
    res_dsa_forward,
)
from .data import (
    DatasetManifest,
    ImageBuffer,
    gaussian_label,
    load_manifest,
    make_dataset,
    read_image,
    sample_patches,
    save_manifest,
    write_image,
)
from .metrics import (
    LossConfig,
    psnr,
    smoothing_loss,
    ssim,
    ssim_db,
    ssim_map,
    total_variation,
)
from .train import (
    AdamState,
    StrategyPlan,
    TrainConfig,
    adam_step,
    augment,
    lr_schedule,
    run_strategy,
    strategy_plan,
    train_operator,
)
from .weights import (
    BlendSpec,
    ParamSet,
    blend,
    compat_check,
    extrapolate_onestep,
    extrapolate_twostep,
    interpolate,
    load_archive,
    save_archive,
)

__version__ = "0.1.0"
