//! A child process writes 1000 records to the encrypted store and is
//! killed at random points, then restarted, until the workload finishes.
//! After every kill the store must reopen with only whole, correct records,
//! and the files on disk must never contain the plaintext.

use std::path::Path;
use std::process::Child;
use std::time::{Duration, Instant};

use carelink_core::domain::{PatientId, PatientProfile};
use carelink_core::store::JOURNAL_FILE;
use carelink_core::InfoStore;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::Verdict;

pub const WRITES: usize = 1000;
pub const CHILD_ENV: &str = "CARELINK_DURABILITY_DIR";
const KEY: &str = "durability-check-key";
const MARKER: &str = "Zephyrine Quillfeather";

fn record(i: usize) -> PatientProfile {
    PatientProfile {
        patient_id: PatientId::new(format!("p-{i:04}")),
        name: format!("{MARKER} {i:04}"),
        age: 60 + (i % 40) as u32,
        gender: "female".into(),
        living_situation: format!("lives alone at {i} Larkspur Lane"),
        conditions: vec!["hypertension".into(), format!("condition-{i}")],
        medical_history: vec!["x".repeat(i % 300)],
    }
}

/// Records present must be exactly `p-0000..p-{n-1}`, each intact.
fn verify(store: &InfoStore) -> Result<usize, String> {
    let patients = store.list_patients().map_err(|e| format!("reading back: {e}"))?;
    for (i, p) in patients.iter().enumerate() {
        ensure!(*p == record(i), "record {i} is not what was written: {:?}", p.patient_id);
    }
    Ok(patients.len())
}

/// Body of the child process.
pub fn child_main(dir: &Path) -> Result<(), String> {
    let store = InfoStore::open(dir, KEY).map_err(|e| e.to_string())?;
    let start = verify(&store)?;
    for i in start..WRITES {
        store.put_patient(&record(i)).map_err(|e| e.to_string())?;
    }
    Ok(())
}

fn plaintext_hits(dir: &Path) -> Result<Vec<String>, String> {
    let needles = [MARKER, "Larkspur", "hypertension", "patient_id", "p-0001"];
    let mut hits = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| e.to_string())? {
        let path = entry.map_err(|e| e.to_string())?.path();
        let bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
        for n in needles {
            if bytes.windows(n.len()).any(|w| w == n.as_bytes()) {
                hits.push(format!("{} contains `{n}`", path.display()));
            }
        }
    }
    Ok(hits)
}

/// `spawn` must start a process that runs [`child_main`] on the directory.
pub fn check(spawn: &dyn Fn(&Path) -> std::io::Result<Child>) -> Verdict {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dir = tmp.path().join("store");
    let mut rng = StdRng::seed_from_u64(0x5eed_0007);
    let (mut kills, mut interrupted, mut restarts) = (0, 0, 0);
    let mut last = 0;

    loop {
        ensure!(restarts < 400, "workload did not finish after {restarts} restarts ({last} records)");
        restarts += 1;
        let size = || std::fs::metadata(dir.join(JOURNAL_FILE)).map(|m| m.len()).unwrap_or(0);
        let before = size();
        let mut child = spawn(&dir).map_err(|e| format!("spawning writer: {e}"))?;
        // Wait for the writer to get going, then kill it at a random moment.
        let deadline = Instant::now() + Duration::from_secs(20);
        while size() <= before && Instant::now() < deadline && child.try_wait().map_err(|e| e.to_string())?.is_none() {
            std::thread::sleep(Duration::from_micros(200));
        }
        std::thread::sleep(Duration::from_micros(rng.gen_range(0..15_000)));
        let finished = match child.try_wait().map_err(|e| e.to_string())? {
            Some(status) => {
                ensure!(status.success(), "writer failed: {status}");
                true
            }
            None => {
                child.kill().map_err(|e| e.to_string())?;
                child.wait().map_err(|e| e.to_string())?;
                kills += 1;
                false
            }
        };
        let store = InfoStore::open(&dir, KEY).map_err(|e| format!("reopening after kill {kills}: {e}"))?;
        let n = verify(&store)?;
        drop(store);
        ensure!(n >= last, "records went from {last} to {n}");
        if !finished && n > last && n < WRITES {
            interrupted += 1;
        }
        last = n;
        let hits = plaintext_hits(&dir)?;
        ensure!(hits.is_empty(), "plaintext on disk: {}", hits.join(", "));
        if finished {
            break;
        }
    }
    ensure!(last == WRITES, "finished with {last} records");
    ensure!(kills > 0 && interrupted > 0, "no kill landed mid-workload ({kills} kills)");

    let wrong = InfoStore::open(&dir, "not-the-key");
    ensure!(wrong.is_err(), "store opened with the wrong key");
    Ok(format!("{WRITES} writes, {kills} kills ({interrupted} mid-workload), 0 corrupt records, no plaintext"))
}
