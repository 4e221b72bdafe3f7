//! Synthetic scenes, captions, tokenizer, and dataset files.

mod io;
mod synth;
mod vocab;

pub use io::{decode_record, encode_record, format_float, read_dataset, write_dataset, Record};
pub use synth::{
    default_classes, generate_classification_set, generate_dataset, generate_scenes,
    render_captions, render_image, Attribute, CaptionPair, ClassSpec, Codebook, Sample, SceneSpec,
    SynthConfig,
};
pub use vocab::{TokenSequence, Vocabulary, BOS, COLORS, EOT, OBJECTS, PAD, POSITIONS, UNK};
