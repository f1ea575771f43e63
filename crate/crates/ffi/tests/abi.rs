use std::ffi::{c_char, CStr, CString};
use std::ptr;

use skillmem_ffi::*;

fn take(s: *mut c_char) -> String {
    assert!(!s.is_null());
    let out = unsafe { CStr::from_ptr(s) }.to_str().unwrap().to_string();
    unsafe { sm_string_free(s) };
    out
}

fn last_error() -> String {
    let p = sm_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn skill_bank_round_trip() {
    let mut bank: *mut SmSkillBank = ptr::null_mut();
    assert_eq!(unsafe { sm_skill_bank_new_primitives(&mut bank) }, SmStatus::SmOk);
    unsafe {
        assert_eq!(sm_skill_bank_len(bank), 4);
        assert_eq!(sm_skill_bank_version(bank), 0);
        let mut json = ptr::null_mut();
        assert_eq!(sm_skill_bank_to_json(bank, &mut json), SmStatus::SmOk);
        let text = CString::new(take(json)).unwrap();
        let mut copy: *mut SmSkillBank = ptr::null_mut();
        assert_eq!(sm_skill_bank_from_json(text.as_ptr(), &mut copy), SmStatus::SmOk);
        assert_eq!(sm_skill_bank_len(copy), 4);
        sm_skill_bank_free(copy);
        sm_skill_bank_free(bank);
        sm_skill_bank_free(ptr::null_mut());
    }
}

#[test]
fn bad_inputs_map_to_status_codes() {
    unsafe {
        let mut bank: *mut SmSkillBank = ptr::null_mut();
        assert_eq!(sm_skill_bank_from_json(ptr::null(), &mut bank), SmStatus::SmErrNullPointer);
        assert!(last_error().contains("null"));
        let junk = CString::new("{not json").unwrap();
        assert_eq!(sm_skill_bank_from_json(junk.as_ptr(), &mut bank), SmStatus::SmErrInvalidArgument);
        assert!(bank.is_null());
        let invalid = [0xffu8, 0xfe, 0];
        assert_eq!(
            sm_skill_bank_from_json(invalid.as_ptr() as *const c_char, &mut bank),
            SmStatus::SmErrUtf8
        );
        let mut json = ptr::null_mut();
        assert_eq!(sm_skill_bank_to_json(ptr::null(), &mut json), SmStatus::SmErrNullPointer);
        assert_eq!(sm_skill_bank_len(ptr::null()), 0);
        let mut mem: *mut SmMemoryBank = ptr::null_mut();
        assert_eq!(sm_memory_bank_new(0, &mut mem), SmStatus::SmErrInvalidArgument);
        let missing = CString::new("/nonexistent/skillmem.toml").unwrap();
        let mut out = ptr::null_mut();
        assert_eq!(sm_train(missing.as_ptr(), &mut out), SmStatus::SmErrConfig);
        assert!(out.is_null());
    }
}

#[test]
fn memory_bank_insert_and_retrieve() {
    let mut mem: *mut SmMemoryBank = ptr::null_mut();
    assert_eq!(unsafe { sm_memory_bank_new(64, &mut mem) }, SmStatus::SmOk);
    unsafe {
        let texts = ["alice lives in paris", "bob likes green tea", "carol owns a red bicycle"];
        let mut ids = Vec::new();
        for (step, t) in texts.iter().enumerate() {
            let c = CString::new(*t).unwrap();
            let mut id = u64::MAX;
            assert_eq!(sm_memory_bank_insert(mem, c.as_ptr(), step as u64, &mut id), SmStatus::SmOk);
            ids.push(id);
        }
        assert_eq!(sm_memory_bank_len(mem), 3);
        let q = CString::new("where does alice live").unwrap();
        let mut out = ptr::null_mut();
        assert_eq!(sm_memory_bank_retrieve_json(mem, q.as_ptr(), 2, &mut out), SmStatus::SmOk);
        let hits: serde_json::Value = serde_json::from_str(&take(out)).unwrap();
        let hits = hits.as_array().unwrap();
        assert_eq!(hits.len(), 2);
        assert_eq!(hits[0]["text"], "alice lives in paris");
        assert_eq!(hits[0]["id"], ids[0]);
        assert_eq!(hits[0]["index"], 0);

        let mut jsonl = ptr::null_mut();
        assert_eq!(sm_memory_bank_to_jsonl(mem, &mut jsonl), SmStatus::SmOk);
        assert_eq!(take(jsonl).lines().count(), 3);
        sm_memory_bank_free(mem);
    }
}

#[test]
fn action_parsing_and_f1() {
    unsafe {
        let text = CString::new("ACTION: INSERT\nMEMORY_ITEM: alice lives in paris\n\nACTION: NOOP\n").unwrap();
        let mut out = ptr::null_mut();
        assert_eq!(sm_parse_actions_json(text.as_ptr(), &mut out), SmStatus::SmOk);
        let v: serde_json::Value = serde_json::from_str(&take(out)).unwrap();
        let actions = v["actions"].as_array().unwrap();
        assert_eq!(actions.len(), 2);
        assert_eq!(actions[0]["op"], "insert");
        assert_eq!(actions[1]["op"], "noop");

        let p = CString::new("x b").unwrap();
        let g = CString::new("x c").unwrap();
        let mut f1 = -1.0;
        assert_eq!(sm_token_f1(p.as_ptr(), g.as_ptr(), &mut f1), SmStatus::SmOk);
        assert!((f1 - 0.5).abs() < 1e-12);
        assert_eq!(sm_token_f1(p.as_ptr(), g.as_ptr(), ptr::null_mut()), SmStatus::SmErrNullPointer);
    }
}

#[test]
fn train_from_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let cfg = format!(
        "seed = 1\nk_train = 2\nevolve_every = 8\nmax_cycles = 1\nhidden = 8\noutput_dir = {:?}\n\
         [synthetic]\ntraces = 2\nspans_per_trace = 2\ncategories = [\"location\", \"temporal\"]\n",
        out_dir.to_str().unwrap()
    );
    let path = dir.path().join("run.toml");
    std::fs::write(&path, cfg).unwrap();
    let c = CString::new(path.to_str().unwrap()).unwrap();
    let mut out = ptr::null_mut();
    let status = unsafe { sm_train(c.as_ptr(), &mut out) };
    assert_eq!(status, SmStatus::SmOk, "{}", last_error());
    let summary: serde_json::Value = serde_json::from_str(&take(out)).unwrap();
    assert_eq!(summary["cycles"].as_array().unwrap().len(), 1);
    assert!(out_dir.join("best_bank.json").exists());
}

#[test]
fn header_declares_every_entry_point() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/skillmem.h")).unwrap();
    for name in [
        "sm_last_error",
        "sm_string_free",
        "sm_skill_bank_new_primitives",
        "sm_skill_bank_from_json",
        "sm_skill_bank_to_json",
        "sm_skill_bank_len",
        "sm_skill_bank_version",
        "sm_skill_bank_free",
        "sm_memory_bank_new",
        "sm_memory_bank_insert",
        "sm_memory_bank_retrieve_json",
        "sm_memory_bank_to_jsonl",
        "sm_memory_bank_len",
        "sm_memory_bank_free",
        "sm_parse_actions_json",
        "sm_token_f1",
        "sm_train",
    ] {
        assert!(header.contains(&format!("{name}(")), "missing {name}");
    }
    assert!(header.contains("SM_ERR_PANIC = 6"));
    assert!(header.contains("typedef struct SmSkillBank SmSkillBank;"));
}

#[test]
fn header_compiles_as_c() {
    let Ok(cc) = std::env::var("CC").or_else(|_| which("cc").ok_or(())) else {
        eprintln!("no C compiler on PATH; header syntax check not run");
        return;
    };
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"skillmem.h\"\nint main(void) { SmSkillBank *b = 0; \
         if (sm_skill_bank_new_primitives(&b) != SM_OK) return 1; \
         sm_skill_bank_free(b); return 0; }\n",
    )
    .unwrap();
    let status = std::process::Command::new(cc)
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(concat!(env!("CARGO_MANIFEST_DIR"), "/include"))
        .arg(&src)
        .status()
        .unwrap();
    assert!(status.success());
}

fn which(name: &str) -> Option<String> {
    std::env::var_os("PATH")?
        .to_str()?
        .split(':')
        .map(|d| std::path::Path::new(d).join(name))
        .find(|p| p.is_file())
        .map(|p| p.to_string_lossy().into_owned())
}
