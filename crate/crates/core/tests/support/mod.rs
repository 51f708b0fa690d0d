pub mod bme_oracle;
pub mod mae_oracle;
pub mod retrieval_oracle;
pub mod triplet_oracle;
