//! Append-only run log. CSV columns: `seq,kind,task,expert,field,value`.
//!
//! | kind        | field                  | value                                   |
//! |-------------|------------------------|-----------------------------------------|
//! | `selection` | `report`               | JSON selection report (one per task)    |
//! | `novelty`   | `report`               | JSON novelty report (one per task)      |
//! | `epoch`     | `loss`                 | mean training loss over the epoch       |
//! | `transfer`  | `mse` or `accuracy`    | transfer score of the active expert     |
//! | `freeze`    | `digest`, `shared`     | SHA-256 of the frozen parameters        |
//! | `eval`      | metric name            | test metric after the task              |
//!
//! Empty `task` or `expert` cells mean "not applicable".

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub seq: u64,
    pub kind: String,
    pub task: Option<usize>,
    pub expert: Option<usize>,
    pub field: String,
    pub value: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventLog {
    events: Vec<Event>,
}

impl EventLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(
        &mut self,
        kind: &str,
        task: Option<usize>,
        expert: Option<usize>,
        field: &str,
        value: impl ToString,
    ) {
        let seq = self.events.len() as u64;
        self.events.push(Event {
            seq,
            kind: kind.into(),
            task,
            expert,
            field: field.into(),
            value: value.to_string(),
        });
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn of_kind<'a>(&'a self, kind: &'a str) -> impl Iterator<Item = &'a Event> + 'a {
        self.events.iter().filter(move |e| e.kind == kind)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for e in &self.events {
            out.serialize(e)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)
            .expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("csv output is UTF-8")
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let events = rd
            .deserialize()
            .collect::<std::result::Result<Vec<Event>, _>>()?;
        Ok(Self { events })
    }
}
