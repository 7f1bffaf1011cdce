pub mod config;
pub mod conllu;
pub mod decode;
pub mod encoder;
pub mod fsutil;
pub mod eval;
pub mod gradcheck;
pub mod lexicalize;
pub mod loss;
pub mod model;
pub mod numeric;
pub mod scorer;
pub mod synthetic;
pub mod tagger;
pub mod train;
pub mod vocab;
