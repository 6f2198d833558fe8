//! Synthetic multi-domain corpora, Dirichlet partitioning across clients and
//! the self-distillation refinery.

mod corpus;
mod domains;
mod jsonl;
mod partition;
mod refinery;

pub use corpus::{pretraining_corpus, sample_dataset, walk, Sample};
pub use domains::{
    build_domains, build_domains_with, filler_tokens, stationary, DomainParams, DomainSpec,
};
pub use jsonl::{read_corpus, read_samples, write_corpus, write_samples, CorpusRecord};
pub use partition::{
    dirichlet_partition, mean_mix_entropy, sample_dirichlet, ClientShard, PartitionSpec,
    MAX_PARTITION_RETRIES,
};
pub use refinery::{distill_all, distill_sample, distill_shard, reset_refinery, DistillConfig};
