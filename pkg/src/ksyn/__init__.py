"""ksyn: synthesis of dynamic MRI k-space data by temporal amplitude fusion
and latent diffusion, on a pure numpy/scipy stack.

Submodules
----------
kspace     transforms and amplitude/phase algebra
phantom    analytic cine phantoms and corpora
fusion     temporal amplitude fusion
nn         minimal layers with hand-written backward passes, Adam, EMA
codec      k-space <-> latent compression model
unet       conditional U-Net behind the noise predictor
diffusion  noise schedule, loss, ancestral sampler
metrics    FD / KID / MMD^2 and PSNR / SSIM / MSE
masks      radial undersampling masks, zero-filled baseline
io         KST tensors, checkpoints, CSV, PNG
config     YAML experiment configs with presets
pipeline   end-to-end recipes and the ablation
cli        command-line entry point
"""

__version__ = "0.1.0"
