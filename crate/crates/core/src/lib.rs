//! Mutual-information DPO (MI-DPO): a single preference-optimisation loss whose
//! reference term is a general prior `ζ(y|x)`, together with the machinery that
//! checks how the common DPO variants fall out of it.
//!
//! Everything runs on exact tabular policies over a tiny vocabulary so that every
//! sequence probability, normaliser and mutual information can be enumerated.
//!
//! Module map:
//!
//! * [`data`]: vocabularies, preference triples, datasets, JSON Lines IO and validation.
//! * [`policy`]: tabular autoregressive policies, sequence log-probabilities, KL and entropy.
//! * [`priors`]: the prior functionals `log ζ` for every supported variant.
//! * [`losses`]: the MI-DPO loss, directly transcribed variant losses and the equivalence report.
//! * [`optimal`]: closed-form optimal policy, Lagrangian dual, reward inversion, Bradley–Terry.
//! * [`infotheory`]: variational mutual information and the rate-distortion objective.
//! * [`train`]: analytic gradients, gradient descent, joint `(π, ζ)` minimisation and DICE rounds.
//! * [`datagen`]: synthetic reward tables and Bradley–Terry preference sampling.
//! * [`cli`]: the `midpo` command-line front end.

pub mod cli;
pub mod data;
pub mod datagen;
pub mod error;
pub mod infotheory;
pub mod losses;
pub mod numerics;
pub mod optimal;
pub mod policy;
pub mod priors;
pub mod train;

pub use data::{
    enumerate_responses, validate_dataset, AlignmentConfig, PreferenceDataset, PreferenceTriple, Token,
    TokenAnnotations, ValidationReport, Vocabulary,
};
pub use error::{Error, Result};
pub use policy::TabularPolicy;
pub use priors::{PriorContext, PriorKind, PriorSpec, Role};
