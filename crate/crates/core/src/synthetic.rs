//! Small generated ophthalmology corpora for tests, benchmarks and demos.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dialogue::{Dialogue, Turn};
use crate::kb::DiseaseDoc;

struct Disease {
    name: &'static str,
    overview: &'static str,
    symptoms: &'static [&'static str],
    treatment: &'static str,
    examination: &'static str,
    etiology: &'static str,
    prevention: &'static str,
    complications: &'static str,
    medication: &'static str,
}

const DISEASES: &[Disease] = &[
    Disease {
        name: "麦粒肿",
        overview: "睫毛毛囊附近腺体的急性化脓性炎症",
        symptoms: &["眼皮红肿", "眼睑疼痛", "眼皮长包"],
        treatment: "早期热敷，脓肿形成后切开排脓",
        examination: "检查眼睑变化",
        etiology: "细菌感染",
        prevention: "注意眼部卫生",
        complications: "睑缘炎",
        medication: "氯霉素滴眼液",
    },
    Disease {
        name: "结膜炎",
        overview: "结膜组织的炎症反应",
        symptoms: &["眼睛发红", "分泌物增多", "眼睛发痒"],
        treatment: "抗菌或抗病毒滴眼液治疗",
        examination: "裂隙灯检查",
        etiology: "细菌病毒或过敏",
        prevention: "勤洗手不揉眼",
        complications: "角膜炎",
        medication: "氧氟沙星滴眼液",
    },
    Disease {
        name: "干眼症",
        overview: "泪液分泌不足导致眼表损害",
        symptoms: &["眼睛干涩", "异物感", "视疲劳"],
        treatment: "人工泪液和热敷",
        examination: "泪液分泌试验",
        etiology: "长时间用眼",
        prevention: "减少屏幕时间",
        complications: "角膜损伤",
        medication: "玻璃酸钠滴眼液",
    },
    Disease {
        name: "白内障",
        overview: "晶状体混浊导致视力下降",
        symptoms: &["视力模糊", "看灯有光晕", "视物发暗"],
        treatment: "手术摘除晶状体",
        examination: "裂隙灯和视力检查",
        etiology: "年龄增长",
        prevention: "避免强光照射",
        complications: "青光眼",
        medication: "吡诺克辛滴眼液",
    },
    Disease {
        name: "青光眼",
        overview: "眼压升高损害视神经",
        symptoms: &["眼睛胀痛", "头痛恶心", "视野缩小"],
        treatment: "降眼压药物或手术",
        examination: "眼压测量",
        etiology: "房水循环障碍",
        prevention: "定期测眼压",
        complications: "失明",
        medication: "噻吗洛尔滴眼液",
    },
    Disease {
        name: "角膜炎",
        overview: "角膜受感染引起的炎症",
        symptoms: &["畏光流泪", "眼睛刺痛", "视力下降"],
        treatment: "针对病原体用药",
        examination: "角膜染色检查",
        etiology: "细菌真菌或病毒",
        prevention: "避免角膜外伤",
        complications: "角膜溃疡",
        medication: "左氧氟沙星滴眼液",
    },
    Disease {
        name: "近视",
        overview: "平行光线聚焦在视网膜前",
        symptoms: &["看远模糊", "眯眼看物", "容易疲劳"],
        treatment: "配戴眼镜矫正",
        examination: "验光检查",
        etiology: "近距离用眼过多",
        prevention: "多做户外活动",
        complications: "视网膜脱离",
        medication: "低浓度阿托品",
    },
    Disease {
        name: "飞蚊症",
        overview: "玻璃体混浊引起眼前漂浮物",
        symptoms: &["眼前黑影", "黑点飘动", "看白墙有影"],
        treatment: "多数无需治疗，定期观察",
        examination: "散瞳眼底检查",
        etiology: "玻璃体变性",
        prevention: "避免过度用眼",
        complications: "视网膜裂孔",
        medication: "卵磷脂络合碘",
    },
    Disease {
        name: "睑缘炎",
        overview: "睑缘皮肤和腺体的慢性炎症",
        symptoms: &["睑缘发红", "睫毛脱落", "眼睑发痒"],
        treatment: "清洁睑缘并局部用药",
        examination: "裂隙灯检查睑缘",
        etiology: "细菌或螨虫",
        prevention: "保持睑缘清洁",
        complications: "麦粒肿",
        medication: "红霉素眼膏",
    },
    Disease {
        name: "视网膜脱离",
        overview: "视网膜神经层与色素层分离",
        symptoms: &["闪光感", "视野缺损", "幕布遮挡"],
        treatment: "尽快手术复位",
        examination: "眼底检查",
        etiology: "视网膜裂孔",
        prevention: "高度近视定期检查",
        complications: "永久视力丧失",
        medication: "术后抗炎滴眼液",
    },
    Disease {
        name: "沙眼",
        overview: "衣原体引起的慢性结膜炎",
        symptoms: &["眼睛磨痛", "睫毛倒长", "眼屎多"],
        treatment: "抗生素治疗",
        examination: "结膜刮片检查",
        etiology: "沙眼衣原体",
        prevention: "不共用毛巾",
        complications: "角膜混浊",
        medication: "阿奇霉素",
    },
    Disease {
        name: "黄斑变性",
        overview: "黄斑区退行性病变",
        symptoms: &["中心视力下降", "视物变形", "直线变弯"],
        treatment: "抗血管生成药物注射",
        examination: "光学相干断层扫描",
        etiology: "年龄相关",
        prevention: "戒烟护眼",
        complications: "中心视力丧失",
        medication: "雷珠单抗",
    },
];

const DURATIONS: &[&str] = &["两天", "三天", "一周", "半个月", "一个月", "好几天"];

fn doc_of(d: &Disease) -> DiseaseDoc {
    DiseaseDoc {
        id: None,
        name: d.name.into(),
        overview: d.overview.into(),
        symptoms: d.symptoms.join("，"),
        treatment: d.treatment.into(),
        examination: d.examination.into(),
        identification: String::new(),
        etiology: d.etiology.into(),
        prevention: d.prevention.into(),
        complications: d.complications.into(),
        medication: d.medication.into(),
    }
}

/// The hand-written disease documents.
pub fn disease_docs() -> Vec<DiseaseDoc> {
    DISEASES.iter().map(doc_of).collect()
}

/// `n` documents: the hand-written ones first, then numbered variants whose
/// symptom and treatment fields are shuffled combinations.
pub fn synthetic_kb(n: usize, seed: u64) -> Vec<DiseaseDoc> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let all_symptoms: Vec<&str> = DISEASES.iter().flat_map(|d| d.symptoms.iter().copied()).collect();
    let mut docs = disease_docs();
    docs.truncate(n);
    let mut i = 0;
    while docs.len() < n {
        let base = &DISEASES[i % DISEASES.len()];
        let mut doc = doc_of(base);
        doc.name = format!("{}{}型", base.name, i / DISEASES.len() + 1);
        let picks: Vec<&str> = all_symptoms.choose_multiple(&mut rng, 3).copied().collect();
        doc.symptoms = picks.join("，");
        doc.treatment = DISEASES.choose(&mut rng).expect("non-empty").treatment.into();
        docs.push(doc);
        i += 1;
    }
    docs
}

fn opening(symptom: &str, duration: &str) -> String {
    format!("医生你好，我{symptom}{duration}了")
}

fn advice(d: &Disease, variant: usize) -> String {
    match variant % 3 {
        0 => format!("考虑{}，{}", d.name, d.treatment),
        1 => format!("可能是{}，建议{}", d.name, d.examination),
        _ => format!("像是{}，可用{}", d.name, d.medication),
    }
}

/// Up to `n` single-round dialogues with distinct patient openings and
/// distinct doctor replies.
pub fn single_round_dialogues(n: usize, seed: u64) -> Vec<Dialogue> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut combos: Vec<(usize, usize, usize)> = Vec::new();
    for (di, d) in DISEASES.iter().enumerate() {
        for si in 0..d.symptoms.len() {
            for du in 0..DURATIONS.len() {
                combos.push((di, si, du));
            }
        }
    }
    combos.shuffle(&mut rng);
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::with_capacity(n);
    for (k, (di, si, du)) in combos.into_iter().enumerate() {
        if out.len() == n {
            break;
        }
        let d = &DISEASES[di];
        let p = opening(d.symptoms[si], DURATIONS[du]);
        let reply = advice(d, k);
        if seen.contains(&p) || seen.contains(&reply) {
            continue;
        }
        seen.insert(p.clone());
        seen.insert(reply.clone());
        out.push(Dialogue::new(format!("s{:04}", out.len()), vec![Turn::patient(p), Turn::doctor(reply)]));
    }
    out
}

const FOLLOW_UPS: &[(&str, &str)] = &[
    ("需要做什么检查吗", "建议做{exam}"),
    ("是什么原因引起的", "多由{cause}引起"),
    ("平时要注意什么", "{prevent}"),
    ("会有什么并发症", "可能并发{comp}"),
    ("用什么药好", "可以用{med}"),
    ("严重吗", "及时治疗一般预后良好"),
];

/// Dialogues of `rounds` patient/doctor exchanges about one disease each.
pub fn multi_round_dialogues(n: usize, rounds: usize, seed: u64) -> Vec<Dialogue> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let d = &DISEASES[rng.random_range(0..DISEASES.len())];
            let symptom = d.symptoms[rng.random_range(0..d.symptoms.len())];
            let duration = DURATIONS[rng.random_range(0..DURATIONS.len())];
            let mut turns = vec![Turn::patient(opening(symptom, duration)), Turn::doctor(advice(d, i))];
            let mut follow: Vec<&(&str, &str)> = FOLLOW_UPS.iter().collect();
            follow.shuffle(&mut rng);
            for (q, a) in follow.into_iter().cycle().take(rounds.saturating_sub(1)) {
                turns.push(Turn::patient(*q));
                turns.push(Turn::doctor(fill_follow_up(a, d)));
            }
            Dialogue::new(format!("m{i:04}"), turns)
        })
        .collect()
}

/// `n` pretraining sentences mixing dialogue utterances and document
/// fields.
pub fn mlm_corpus(n: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool: Vec<String> = Vec::new();
    for d in DISEASES {
        pool.push(format!("{}是{}", d.name, d.overview));
        pool.push(format!("{}的治疗方法是{}", d.name, d.treatment));
        pool.push(format!("{}常用{}", d.name, d.medication));
        pool.push(format!("{}需要{}", d.name, d.examination));
        pool.push(format!("{}多由{}引起", d.name, d.etiology));
        for s in d.symptoms {
            pool.push(format!("{}的症状有{}", d.name, s));
            for du in DURATIONS {
                pool.push(format!("医生你好，我{s}{du}了"));
            }
        }
    }
    (0..n).map(|_| pool.choose(&mut rng).expect("non-empty pool").clone()).collect()
}

fn fill_follow_up(a: &str, d: &Disease) -> String {
    a.replace("{exam}", d.examination)
        .replace("{cause}", d.etiology)
        .replace("{prevent}", d.prevention)
        .replace("{comp}", d.complications)
        .replace("{med}", d.medication)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_round_is_distinct_and_valid() {
        let ds = single_round_dialogues(20, 1);
        assert_eq!(ds.len(), 20);
        let replies: std::collections::HashSet<_> = ds.iter().map(|d| d.turns[1].text.clone()).collect();
        let openings: std::collections::HashSet<_> = ds.iter().map(|d| d.turns[0].text.clone()).collect();
        assert_eq!(openings.len(), 20);
        assert_eq!(replies.len(), 20);
        assert!(ds.iter().all(|d| d.validate().is_ok()));
    }

    #[test]
    fn multi_round_shape() {
        let ds = multi_round_dialogues(3, 4, 2);
        assert!(ds.iter().all(|d| d.turns.len() == 8 && d.validate().is_ok()));
    }

    #[test]
    fn kb_names_unique() {
        let kb = synthetic_kb(50, 3);
        let names: std::collections::HashSet<_> = kb.iter().map(|d| d.name.clone()).collect();
        assert_eq!(names.len(), 50);
    }
}
