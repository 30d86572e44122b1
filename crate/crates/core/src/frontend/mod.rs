//! Waveform to patch tokens.

mod fbank;
mod patch;
mod wav;

pub use fbank::{
    compute_fbank, hz_to_mel, mel_to_hz, read_fbank, write_fbank, FbankConfig, FbankExtractor,
    FbankSpectrogram,
};
pub use patch::{
    grid_dims, patch_pixel_map, patchify, patchify_and_embed, sinusoidal_pos_enc, unpatchify,
    PatchEmbeddings, Patches,
};
pub use wav::{encode_wav, load_wav, read_wav, write_wav, Waveform, DEFAULT_SAMPLE_RATE};
