use std::io::{Read, Write};

use super::model::{Backbone, LmConfig};
use crate::error::{Error, Result};
use crate::format::{ArtifactKind, NamedTensorFile};

impl Backbone {
    pub fn to_file(&self) -> NamedTensorFile {
        NamedTensorFile {
            kind: ArtifactKind::Backbone,
            fields: self.config().to_fields(),
            step: self.step(),
            params: self.params().clone(),
        }
    }

    pub fn from_file(file: NamedTensorFile) -> Result<Self> {
        if file.kind != ArtifactKind::Backbone {
            return Err(Error::Format("not a backbone checkpoint".into()));
        }
        let config = LmConfig::from_fields(&file.fields)?;
        Backbone::from_parts(config, file.params, file.step)
    }

    pub fn save<W: Write>(&self, w: &mut W) -> Result<()> {
        self.to_file().write_to(w)
    }

    pub fn load<R: Read>(r: &mut R) -> Result<Self> {
        Self::from_file(NamedTensorFile::read_from(r)?)
    }
}
